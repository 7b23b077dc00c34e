"""The 32 simulation designs: four binary design features crossed with two sample sizes."""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["DgpSpec", "DGP_TABLE", "dgp_spec", "dgp_id_for", "SAMPLE_SIZES"]

SAMPLE_SIZES = (1000, 2000)

# (heterogeneity, strong_selection, observed_strength) for ids 1..8; ids 9..16
# repeat them with the binary outcome, ids 17..32 repeat 1..16 at n = 2000.
_BLOCK = (
    (0, 0, 1),
    (1, 0, 0),
    (0, 1, 1),
    (0, 0, 0),
    (1, 1, 0),
    (1, 0, 1),
    (0, 1, 0),
    (1, 1, 1),
)


@dataclass(frozen=True)
class DgpSpec:
    """One data-generating process of the simulation grid."""

    heterogeneity: bool
    strong_selection: bool
    observed_strength: bool
    binary_outcome: bool
    sample_size: int
    dgp_id: int

    def __post_init__(self):
        expected = dgp_id_for(self.heterogeneity, self.strong_selection, self.observed_strength,
                              self.binary_outcome, self.sample_size)
        if expected != self.dgp_id:
            raise ValueError(f"dgp_id {self.dgp_id} does not match its flags (expected {expected})")

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.heterogeneity, self.strong_selection, self.observed_strength, self.binary_outcome)

    def scaled(self, sample_size: int) -> "DgpSpec":
        """Same design at another sample size; the id keeps the grid's size slot."""
        return _ScaledSpec(*self.flags, int(sample_size), self.dgp_id)


@dataclass(frozen=True)
class _ScaledSpec(DgpSpec):
    def __post_init__(self):
        if self.sample_size < 2:
            raise ValueError("sample_size must be at least 2")


def dgp_id_for(heterogeneity, strong_selection, observed_strength, binary_outcome, sample_size) -> int:
    """Grid id of a flag combination."""
    if sample_size not in SAMPLE_SIZES:
        raise ValueError(f"sample_size must be one of {SAMPLE_SIZES}")
    pos = _BLOCK.index((int(bool(heterogeneity)), int(bool(strong_selection)), int(bool(observed_strength))))
    return 1 + pos + 8 * int(bool(binary_outcome)) + 16 * SAMPLE_SIZES.index(sample_size)


def dgp_spec(dgp_id: int) -> DgpSpec:
    """:class:`DgpSpec` for a grid id in 1..32."""
    dgp_id = int(dgp_id)
    if not 1 <= dgp_id <= 32:
        raise ValueError("dgp_id must be in 1..32")
    k = dgp_id - 1
    het, sel, obs = _BLOCK[k % 8]
    return DgpSpec(bool(het), bool(sel), bool(obs), bool((k // 8) % 2), SAMPLE_SIZES[k // 16], dgp_id)


DGP_TABLE = tuple(dgp_spec(i) for i in range(1, 33))
