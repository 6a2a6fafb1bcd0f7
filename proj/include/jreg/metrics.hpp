#pragma once

// Trajectory metrics over the residual stream.
//
//   Ψ_ℓ = 1 − ½ (1 + cos(h_{ℓ−1}, h_ℓ))                        ∈ [0, 1]
//   ζ_ℓ = 100 · Σ_{k=ℓ}^{L} max(0, Ψ_k − Ψ_{k−1})              2 ≤ ℓ ≤ L
//   Δ_ℓ = Ψ_ℓ(a) − Ψ_ℓ(b)
//
// Profiles average Ψ over real positions first; jump rates are then taken
// on the averaged profile.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "jreg/model.hpp"
#include "jreg/tensor.hpp"

namespace jreg {

struct DisplacementProfile {
  std::vector<double> values;  // values[ℓ−1] = Ψ_ℓ
  std::size_t n_positions = 1;

  std::size_t n_layers() const { return values.size(); }
  // 1-based layer index.
  double psi(std::size_t layer) const;
};

struct JumpReport {
  std::vector<std::pair<std::size_t, double>> zeta;  // (ℓ, ζ_ℓ)
};

// Plain-value displacement between two states of equal length.
double displacement(std::span<const double> prev, std::span<const double> curr);
// Differentiable displacement of two vectors (scalar) or of matching rows of
// two [n×D] matrices (shape [n]).
Tensor displacement(const Tensor& prev, const Tensor& curr);
Tensor displacement_rows(const Tensor& prev, const Tensor& curr);

// Mean per-position Ψ over the trace's real positions. If filter is
// non-empty, only rows with filter[row] != 0 are averaged as well.
DisplacementProfile profile(const HiddenTrace& trace, std::span<const std::uint8_t> filter = {});

// One single-position profile per real row, in row order (diagnostics).
std::vector<DisplacementProfile> per_position_profiles(const HiddenTrace& trace);

double jump_rate(const DisplacementProfile& profile, std::size_t ell);
JumpReport jump_report(const DisplacementProfile& profile, std::span<const std::size_t> ells);
// ζ_ℓ of every single-position profile (diagnostics).
std::vector<double> per_position_jump_rate(const HiddenTrace& trace, std::size_t ell);

std::vector<double> redundancy_delta(const DisplacementProfile& a, const DisplacementProfile& b);

// Filter selecting the last real position of each sequence in a batch.
std::vector<std::uint8_t> last_position_filter(const TokenBatch& batch);

}  // namespace jreg
