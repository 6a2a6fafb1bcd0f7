#include "jreg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "jreg/errors.hpp"

namespace jreg {

double DisplacementProfile::psi(std::size_t layer) const {
  if (layer < 1 || layer > values.size()) {
    throw RangeError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(values.size()) + "]");
  }
  return values[layer - 1];
}

double displacement(std::span<const double> prev, std::span<const double> curr) {
  if (prev.size() != curr.size()) {
    throw DimensionError("displacement: state widths differ (" + std::to_string(prev.size()) + " vs " +
                         std::to_string(curr.size()) + ")");
  }
  double dot = 0.0, sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < prev.size(); ++i) {
    dot += prev[i] * curr[i];
    sa += prev[i] * prev[i];
    sb += curr[i] * curr[i];
  }
  if (sa == 0.0 && sb == 0.0) throw DegenerateInputError("displacement between two zero states");
  const double cos = dot / (std::sqrt(sa) * std::sqrt(sb) + kCosineEpsilon);
  return std::clamp(1.0 - 0.5 * (1.0 + cos), 0.0, 1.0);
}

Tensor displacement(const Tensor& prev, const Tensor& curr) {
  return 1.0 - (cosine_similarity(prev, curr) + 1.0) * 0.5;
}

Tensor displacement_rows(const Tensor& prev, const Tensor& curr) {
  return 1.0 - (cosine_similarity_rows(prev, curr) + 1.0) * 0.5;
}

namespace {

bool selected(const HiddenTrace& trace, std::span<const std::uint8_t> filter, std::size_t row) {
  return trace.is_real(row) && (filter.empty() || filter[row] != 0);
}

}  // namespace

DisplacementProfile profile(const HiddenTrace& trace, std::span<const std::uint8_t> filter) {
  trace.validate();
  const std::size_t rows = trace.rows(), width = trace.width(), n_layers = trace.n_layers();
  if (!filter.empty() && filter.size() != rows) {
    throw ContractError("position filter has " + std::to_string(filter.size()) + " entries for " +
                        std::to_string(rows) + " rows");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) count += selected(trace, filter, r);
  if (count == 0) throw ContractError("profile: no positions selected");

  DisplacementProfile out;
  out.values.assign(n_layers, 0.0);
  out.n_positions = count;
  for (std::size_t l = 1; l <= n_layers; ++l) {
    const auto prev = trace.states[l - 1].data();
    const auto curr = trace.states[l].data();
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!selected(trace, filter, r)) continue;
      acc += displacement(prev.subspan(r * width, width), curr.subspan(r * width, width));
    }
    out.values[l - 1] = acc / static_cast<double>(count);
  }
  return out;
}

std::vector<DisplacementProfile> per_position_profiles(const HiddenTrace& trace) {
  trace.validate();
  const std::size_t rows = trace.rows(), width = trace.width(), n_layers = trace.n_layers();
  std::vector<DisplacementProfile> out;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!trace.is_real(r)) continue;
    DisplacementProfile p;
    p.values.resize(n_layers);
    for (std::size_t l = 1; l <= n_layers; ++l) {
      p.values[l - 1] = displacement(trace.states[l - 1].data().subspan(r * width, width),
                                     trace.states[l].data().subspan(r * width, width));
    }
    out.push_back(std::move(p));
  }
  return out;
}

double jump_rate(const DisplacementProfile& profile, std::size_t ell) {
  const std::size_t n_layers = profile.n_layers();
  if (ell < 2 || ell > n_layers) {
    throw RangeError("jump rate index " + std::to_string(ell) + " outside [2, " + std::to_string(n_layers) + "]");
  }
  double acc = 0.0;
  for (std::size_t k = n_layers; k >= ell; --k) {
    acc += std::max(0.0, profile.values[k - 1] - profile.values[k - 2]);
  }
  return acc * 100.0;
}

JumpReport jump_report(const DisplacementProfile& profile, std::span<const std::size_t> ells) {
  JumpReport r;
  for (auto ell : ells) r.zeta.emplace_back(ell, jump_rate(profile, ell));
  return r;
}

std::vector<double> per_position_jump_rate(const HiddenTrace& trace, std::size_t ell) {
  std::vector<double> out;
  for (const auto& p : per_position_profiles(trace)) out.push_back(jump_rate(p, ell));
  return out;
}

std::vector<double> redundancy_delta(const DisplacementProfile& a, const DisplacementProfile& b) {
  if (a.n_layers() != b.n_layers()) {
    throw ContractError("redundancy_delta: profiles have " + std::to_string(a.n_layers()) + " and " +
                        std::to_string(b.n_layers()) + " layers");
  }
  std::vector<double> out(a.n_layers());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values[i] - b.values[i];
  return out;
}

std::vector<std::uint8_t> last_position_filter(const TokenBatch& batch) {
  std::vector<std::uint8_t> filter(batch.positions(), 0);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = batch.seq_len; t-- > 0;) {
      const std::size_t row = b * batch.seq_len + t;
      if (batch.mask.empty() || batch.mask[row]) {
        filter[row] = 1;
        break;
      }
    }
  }
  return filter;
}

}  // namespace jreg
