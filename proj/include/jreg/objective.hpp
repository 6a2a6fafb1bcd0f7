#pragma once

// Training objectives.
//
//   L_CE   = mean over real positions of −log p(target)
//   L_disp = Σ_ℓ w_ℓ Ψ̄_ℓ,  w = softmax(α · (1, …, L))       (weighted)
//          = Ψ̄_L                                              (final_only)
//   L      = L_CE + λ L_disp
//
// Ψ̄_ℓ is the position mean of the differentiable displacement, reduced the
// same way as L_CE.

#include <string>
#include <string_view>
#include <vector>

#include "jreg/model.hpp"
#include "jreg/tensor.hpp"

namespace jreg {

enum class JregVariant { weighted, final_only, off };

std::string_view to_string(JregVariant v);
JregVariant parse_variant(std::string_view s);

struct JregConfig {
  double alpha = 1.0;
  double lambda = 1.0;
  JregVariant variant = JregVariant::weighted;
  // Ablation: stop the gradient through h_{ℓ−1} of every displacement term.
  bool detach_input = false;

  void validate() const;
};

struct LayerWeights {
  std::vector<double> w;  // w[ℓ−1] = w_ℓ
};

LayerWeights layer_weights(double alpha, std::size_t n_layers);

Tensor ce_loss(const Tensor& logits, const TokenBatch& batch);

Tensor disp_loss(const HiddenTrace& trace, const LayerWeights& weights, JregVariant variant,
                 bool detach_input = false);

struct JregLoss {
  Tensor total;
  Tensor ce;
  Tensor disp;  // untracked observation when the variant is off
};

JregLoss jreg_loss(const Tensor& logits, const TokenBatch& batch, const HiddenTrace& trace, const JregConfig& cfg);

}  // namespace jreg
