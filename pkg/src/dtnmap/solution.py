"""Root-level solution operator shared by both engines."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .hbs import HbsMatrix, LowRankFactors, _write_array, reconstruct, serialize
from .hbs_ops import InverseFactors, apply_inverse, serialize_inverse


@dataclass
class SolutionOperator:
    """``S`` on the root boundary and ``G = S^{-1}``.

    ``boundary`` lists the unknowns on the outermost ring counterclockwise
    from the southwest corner.  The dense engine stores ``S`` and ``G`` as
    arrays; the accelerated engine stores ``S`` as an HBS matrix and ``G`` as
    its inverse factors.  ``body`` is the optional boundary response to the
    fixed body-load nodes ``body_nodes`` (low-rank, ``N_boundary x N_body``).
    """

    boundary: np.ndarray
    engine: str
    S: Union[np.ndarray, HbsMatrix]
    G: Union[np.ndarray, InverseFactors]
    cond: Optional[float] = None
    body: Optional[LowRankFactors] = None
    body_nodes: Optional[np.ndarray] = None
    levels: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.boundary)

    @property
    def compressed(self) -> bool:
        return isinstance(self.S, HbsMatrix)

    def apply_dtn(self, g: np.ndarray) -> np.ndarray:
        """``G g`` for a boundary load ``g`` (or a block of loads)."""
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.size:
            raise ValueError(f"boundary vector has length {g.shape[0]}, expected {self.size}")
        if self.compressed:
            return apply_inverse(self.G, g)
        return self.G @ g

    def solve_with_load(self, g: np.ndarray, fhat: np.ndarray) -> np.ndarray:
        from .bodyload import solve_with_load

        return solve_with_load(self, g, fhat)

    def dense_S(self) -> np.ndarray:
        return reconstruct(self.S) if self.compressed else self.S

    def dense_G(self) -> np.ndarray:
        return apply_inverse(self.G, np.eye(self.size)) if self.compressed else self.G

    def max_rank(self) -> int:
        return self.S.max_rank() if self.compressed else 0

    def serialize(self) -> bytes:
        """Bytes of every retained factor payload (plus the body map)."""
        if self.compressed:
            out = serialize(self.S) + serialize_inverse(self.G)
        else:
            buf = io.BytesIO()
            buf.write(b"DNS1")
            _write_array(buf, self.S)
            _write_array(buf, self.G)
            out = buf.getvalue()
        if self.body is not None:
            buf = io.BytesIO()
            buf.write(b"BDY1")
            _write_array(buf, self.body.L)
            _write_array(buf, self.body.R)
            out += buf.getvalue()
        return out

    def nbytes(self) -> int:
        """Memory M(n): serialized size of the operator in bytes."""
        return len(self.serialize())
