#pragma once

#include "derfkit/layers.hpp"
#include "derfkit/rng.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace derfkit {

enum class SlotKind { layer_norm, rms_norm, dyt, derf, dynamic };
std::string to_string(SlotKind k);
SlotKind slot_kind_from_string(const std::string& s);

enum class FnTransform { none, shift_h, shift_v, clip, mix, flat, negated, scaled_tanh_fn };
std::string to_string(FnTransform t);
FnTransform fn_transform_from_string(const std::string& s);

// What fills the pre-attention / pre-FFN / final norm positions. For the
// dynamic kind, the point-wise function is a catalog entry optionally run
// through one construction transform (the sweep axes).
struct SlotSpec {
    SlotKind kind = SlotKind::layer_norm;
    std::string fn_name = "erf";                 // dynamic only
    SMode s_mode = SMode::scalar;                // dynamic only
    FnTransform transform = FnTransform::none;   // dynamic only
    double transform_value = 0.0;

    std::string label() const;  // report-facing, e.g. "dynamic(clip(arcsinh,1))"
};

// Materializes the slot's function, applying the configured transform.
PointwiseFn resolve_slot_fn(const SlotSpec& slot);

struct ToyTransformerConfig {
    std::size_t depth = 2;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t seq_len = 16;
    std::size_t n_classes = 2;
    std::size_t c_in = 8;
    SlotSpec norm_slot;
    double drop_path_rate = 0.0;
    double norm_epsilon = 1e-5;
    double alpha0 = 0.5;
    std::uint64_t seed = 0;

    // Errors with a message listing every violation.
    void validate() const;
};

nlohmann::json config_to_json(const ToyTransformerConfig& cfg);
ToyTransformerConfig config_from_json(const nlohmann::json& j);

struct ToyBatch {
    Tensor inputs;                     // [B, T, C_in]
    std::vector<std::int64_t> labels;  // [B]
};

// Pre-norm transformer encoder classifier:
//   per block: x += DropPath(Attn(N(x))); x += DropPath(FFN(N(x)))
//   then final N, mean-pool over tokens, linear head.
// All N positions hold the configured slot layer.
class ToyTransformer {
public:
    explicit ToyTransformer(ToyTransformerConfig cfg);

    const ToyTransformerConfig& config() const { return cfg_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    std::size_t scalar_count() const;
    std::size_t norm_layer_count() const { return cfg_.depth * 2 + 1; }

    // Binds every parameter as a gradient-requiring leaf on `tape` (one Var
    // per parameter, in parameters() order, written to `bound` when given)
    // and returns the logits Var [B, n_classes]. Train mode draws per-sample
    // drop-path masks from rng; eval mode touches no randomness.
    Var forward(Tape& tape, const ToyBatch& batch, bool train_mode, Rng& rng,
                std::vector<Var>* bound = nullptr) const;

    // Eval-mode argmax predictions.
    std::vector<std::int64_t> predict(const ToyBatch& batch) const;

private:
    struct SlotIdx {
        std::size_t gamma = Var::npos;
        std::size_t beta = Var::npos;
        std::size_t alpha = Var::npos;
        std::size_t s = Var::npos;
    };
    struct BlockIdx {
        SlotIdx norm1, norm2;
        std::size_t wq = 0, bq = 0, wk = 0, bk = 0, wv = 0, bv = 0, wo = 0, bo = 0;
        std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
    };

    std::size_t add_param(const std::string& name, Tensor value);
    SlotIdx add_slot_params(const std::string& prefix);
    Var slot_forward(Tape& tape, const std::vector<Var>& pv, const SlotIdx& idx, Var x) const;
    Var drop_path(Tape& tape, Var x, std::size_t batch, bool train_mode, Rng& rng) const;

    ToyTransformerConfig cfg_;
    std::vector<Parameter> params_;
    std::size_t embed_w_ = 0, embed_b_ = 0, pos_ = 0;
    std::vector<BlockIdx> blocks_;
    SlotIdx final_norm_;
    std::size_t head_w_ = 0, head_b_ = 0;
    PointwiseFn slot_fn_;       // resolved once; unused for layer_norm/rms_norm
    SMode slot_s_mode_ = SMode::absent;
    bool slot_is_norm_ = true;
    NormKind slot_norm_kind_ = NormKind::layer_norm;
};

// Checkpoint file: "DFKC" magic, little-endian u64 JSON length, JSON holding
// the config and a (name, shape, offset) manifest, then the raw f64 blob.
void save_checkpoint(const ToyTransformer& model, const std::string& path);
ToyTransformer load_checkpoint(const std::string& path);

} // namespace derfkit
