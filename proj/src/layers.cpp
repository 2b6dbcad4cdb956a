#include "derfkit/layers.hpp"

#include "derfkit/errors.hpp"

namespace derfkit {

std::string to_string(NormKind k) {
    return k == NormKind::layer_norm ? "layer_norm" : "rms_norm";
}

std::string to_string(SMode m) {
    switch (m) {
        case SMode::absent: return "absent";
        case SMode::scalar: return "scalar";
        case SMode::per_channel: return "per_channel";
    }
    return "?";
}

NormKind norm_kind_from_string(const std::string& s) {
    if (s == "layer_norm") return NormKind::layer_norm;
    if (s == "rms_norm") return NormKind::rms_norm;
    throw ConfigError("unknown norm kind '" + s + "' (expected layer_norm or rms_norm)");
}

SMode s_mode_from_string(const std::string& s) {
    if (s == "absent") return SMode::absent;
    if (s == "scalar") return SMode::scalar;
    if (s == "per_channel") return SMode::per_channel;
    throw ConfigError("unknown s_mode '" + s + "' (expected absent, scalar, or per_channel)");
}

NormLayer init_norm_layer(NormKind kind, std::size_t channels, double epsilon, bool with_beta) {
    if (channels < 1) throw ParameterError("norm layer needs at least one channel");
    if (epsilon < 0.0) throw ParameterError("norm epsilon must be nonnegative");
    NormLayer layer;
    layer.kind = kind;
    layer.epsilon = epsilon;
    layer.with_beta = kind == NormKind::layer_norm ? true : with_beta;
    layer.gamma = Tensor::ones({channels});
    layer.beta = Tensor::zeros({channels});
    return layer;
}

DynamicPointwiseLayer init_dynamic_layer(const PointwiseFn& f, std::size_t channels,
                                         SMode s_mode, double alpha0) {
    if (channels < 1) throw ParameterError("dynamic point-wise layer needs at least one channel");
    DynamicPointwiseLayer layer;
    layer.f = f;
    layer.s_mode = s_mode;
    layer.alpha = Tensor::scalar(alpha0);
    if (s_mode == SMode::scalar) {
        layer.s = Tensor::zeros({1});
    } else if (s_mode == SMode::per_channel) {
        layer.s = Tensor::zeros({channels});
    }
    layer.gamma = Tensor::ones({channels});
    layer.beta = Tensor::zeros({channels});
    return layer;
}

DynamicPointwiseLayer init_dyt_layer(std::size_t channels, double alpha0) {
    return init_dynamic_layer(find_fn("tanh"), channels, SMode::absent, alpha0);
}

DynamicPointwiseLayer init_derf_layer(std::size_t channels, double alpha0) {
    return init_dynamic_layer(find_fn("erf"), channels, SMode::scalar, alpha0);
}

Var norm_forward(Tape& tape, const NormLayer& layer, Var x, std::vector<BoundParam>* bound) {
    const Var gamma = tape.leaf(layer.gamma, true);
    if (bound) bound->push_back({"gamma", gamma});
    if (layer.kind == NormKind::layer_norm) {
        const Var beta = tape.leaf(layer.beta, true);
        if (bound) bound->push_back({"beta", beta});
        return tape.layer_norm(x, gamma, beta, layer.epsilon);
    }
    Var beta;  // invalid = no beta term
    if (layer.with_beta) {
        beta = tape.leaf(layer.beta, true);
        if (bound) bound->push_back({"beta", beta});
    }
    return tape.rms_norm(x, gamma, beta, layer.epsilon);
}

Var dyn_pointwise_forward(Tape& tape, const DynamicPointwiseLayer& layer, Var x,
                          std::vector<BoundParam>* bound) {
    const Var alpha = tape.leaf(layer.alpha, true);
    if (bound) bound->push_back({"alpha", alpha});
    Var s;
    if (layer.s_mode != SMode::absent) {
        s = tape.leaf(layer.s, true);
        if (bound) bound->push_back({"s", s});
    }
    const Var gamma = tape.leaf(layer.gamma, true);
    const Var beta = tape.leaf(layer.beta, true);
    if (bound) {
        bound->push_back({"gamma", gamma});
        bound->push_back({"beta", beta});
    }
    return tape.dynamic_pointwise(x, alpha, s, gamma, beta, layer.f.value, layer.f.derivative,
                                  layer.f.name);
}

} // namespace derfkit
