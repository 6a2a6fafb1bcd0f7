#include "jreg/objective.hpp"

#include <cmath>

#include "jreg/errors.hpp"
#include "jreg/metrics.hpp"

namespace jreg {

std::string_view to_string(JregVariant v) {
  switch (v) {
    case JregVariant::weighted: return "weighted";
    case JregVariant::final_only: return "final_only";
    case JregVariant::off: return "off";
  }
  return "unknown";
}

JregVariant parse_variant(std::string_view s) {
  if (s == "weighted") return JregVariant::weighted;
  if (s == "final_only") return JregVariant::final_only;
  if (s == "off") return JregVariant::off;
  throw ContractError("unknown regularizer variant \"" + std::string(s) + "\" (expected weighted, final_only, off)");
}

void JregConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ContractError("jreg: alpha must be finite and >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ContractError("jreg: lambda must be finite and >= 0");
}

LayerWeights layer_weights(double alpha, std::size_t n_layers) {
  if (n_layers < 1) throw ContractError("layer_weights: need at least one layer");
  if (!(alpha >= 0.0)) throw ContractError("layer_weights: alpha must be >= 0");
  LayerWeights out;
  out.w.resize(n_layers);
  // the largest logit is α·L; subtract it before exponentiating
  const double top = alpha * static_cast<double>(n_layers);
  double z = 0.0;
  for (std::size_t l = 1; l <= n_layers; ++l) {
    out.w[l - 1] = std::exp(alpha * static_cast<double>(l) - top);
    z += out.w[l - 1];
  }
  for (auto& w : out.w) w /= z;
  return out;
}

Tensor ce_loss(const Tensor& logits, const TokenBatch& batch) {
  if (batch.targets.empty()) throw ContractError("ce_loss: batch has no targets");
  return cross_entropy(logits, batch.targets, batch.mask);
}

Tensor disp_loss(const HiddenTrace& trace, const LayerWeights& weights, JregVariant variant, bool detach_input) {
  trace.validate();
  const std::size_t n_layers = trace.n_layers();
  if (weights.w.size() != n_layers) {
    throw ContractError("disp_loss: " + std::to_string(weights.w.size()) + " weights for a trace of " +
                        std::to_string(n_layers) + " layers");
  }
  const std::size_t rows = trace.rows();
  std::vector<std::int32_t> real_rows;
  if (trace.positions() != rows) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (trace.is_real(r)) real_rows.push_back(static_cast<std::int32_t>(r));
    }
  }
  auto state = [&](std::size_t l) {
    return real_rows.empty() ? trace.states[l] : gather_rows(trace.states[l], real_rows);
  };
  const std::size_t count = trace.positions();
  const std::vector<double> uniform(count, 1.0 / static_cast<double>(count));

  auto layer_mean = [&](std::size_t l) {
    Tensor prev = state(l - 1);
    if (detach_input) prev = prev.detach();
    return weighted_sum(displacement_rows(prev, state(l)), uniform);
  };

  if (variant == JregVariant::final_only) return layer_mean(n_layers);

  Tensor total;
  for (std::size_t l = 1; l <= n_layers; ++l) {
    Tensor term = layer_mean(l) * weights.w[l - 1];
    total = total.defined() ? total + term : term;
  }
  return total;
}

JregLoss jreg_loss(const Tensor& logits, const TokenBatch& batch, const HiddenTrace& trace, const JregConfig& cfg) {
  cfg.validate();
  JregLoss out;
  out.ce = ce_loss(logits, batch);
  const auto weights = layer_weights(cfg.alpha, trace.n_layers());
  if (cfg.variant == JregVariant::off || cfg.lambda == 0.0) {
    NoGradGuard no_grad;
    const auto variant = cfg.variant == JregVariant::off ? JregVariant::weighted : cfg.variant;
    out.disp = disp_loss(trace, weights, variant, cfg.detach_input);
    out.total = out.ce;
    return out;
  }
  out.disp = disp_loss(trace, weights, cfg.variant, cfg.detach_input);
  out.total = out.ce + out.disp * cfg.lambda;
  return out;
}

}  // namespace jreg
