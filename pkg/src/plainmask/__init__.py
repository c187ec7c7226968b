# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import importlib.metadata

try:
    __version__ = importlib.metadata.version("plainmask")
except importlib.metadata.PackageNotFoundError:
    # Not installed
    __version__ = "0.0.0"
