# Copyright 2023-2024 ehrfusion developers
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
ehrfusion
=========

Hypergraph neural networks over visits and medical codes, with medical
concept semantics infused into node features and clinical note semantics
infused into hyperedge updates.
"""

from ehrfusion.version import __version__

VERSION = __version__
