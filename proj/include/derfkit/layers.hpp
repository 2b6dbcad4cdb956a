#pragma once

#include "derfkit/funcs.hpp"
#include "derfkit/tape.hpp"

#include <string>
#include <vector>

namespace derfkit {

// A named trainable tensor. Layers and models own Parameters; each training
// step binds them onto a fresh tape as gradient-requiring leaves.
struct Parameter {
    std::string name;
    Tensor value;
};

enum class NormKind { layer_norm, rms_norm };
enum class SMode { absent, scalar, per_channel };

std::string to_string(NormKind k);
std::string to_string(SMode m);
NormKind norm_kind_from_string(const std::string& s);
SMode s_mode_from_string(const std::string& s);

// Per-token normalization layer: gamma/beta over the channel axis.
// rms_norm carries beta only when with_beta is set.
struct NormLayer {
    NormKind kind = NormKind::layer_norm;
    double epsilon = 1e-5;
    bool with_beta = true;
    Tensor gamma;  // [C]
    Tensor beta;   // [C]

    std::size_t channels() const { return gamma.numel(); }
};

// y = gamma_c * f(alpha*x + s) + beta_c with learnable alpha (scalar),
// s (scalar, per-channel, or absent), gamma, beta.
struct DynamicPointwiseLayer {
    PointwiseFn f;
    SMode s_mode = SMode::scalar;
    Tensor alpha;  // [1]
    Tensor s;      // [1] or [C]; empty when absent
    Tensor gamma;  // [C]
    Tensor beta;   // [C]

    std::size_t channels() const { return gamma.numel(); }
};

// gamma = ones, beta = zeros.
NormLayer init_norm_layer(NormKind kind, std::size_t channels, double epsilon = 1e-5,
                          bool with_beta = true);
// gamma = ones, beta = zeros, alpha = alpha0 (default 0.5), s = 0.
DynamicPointwiseLayer init_dynamic_layer(const PointwiseFn& f, std::size_t channels,
                                         SMode s_mode, double alpha0 = 0.5);
DynamicPointwiseLayer init_dyt_layer(std::size_t channels, double alpha0 = 0.5);
DynamicPointwiseLayer init_derf_layer(std::size_t channels, double alpha0 = 0.5);

// Parameter leaves bound onto a tape during one forward call, so callers can
// read gradients after backward.
struct BoundParam {
    std::string name;
    Var var;
};

// Binds the layer's parameters onto the tape and applies the op to x
// ([..., C]). `bound` (optional) receives one entry per parameter.
Var norm_forward(Tape& tape, const NormLayer& layer, Var x,
                 std::vector<BoundParam>* bound = nullptr);
Var dyn_pointwise_forward(Tape& tape, const DynamicPointwiseLayer& layer, Var x,
                          std::vector<BoundParam>* bound = nullptr);

} // namespace derfkit
