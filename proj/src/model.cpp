#include "derfkit/model.hpp"

#include "derfkit/errors.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace derfkit {

using nlohmann::json;

std::string to_string(SlotKind k) {
    switch (k) {
        case SlotKind::layer_norm: return "layer_norm";
        case SlotKind::rms_norm: return "rms_norm";
        case SlotKind::dyt: return "dyt";
        case SlotKind::derf: return "derf";
        case SlotKind::dynamic: return "dynamic";
    }
    return "?";
}

SlotKind slot_kind_from_string(const std::string& s) {
    if (s == "layer_norm") return SlotKind::layer_norm;
    if (s == "rms_norm") return SlotKind::rms_norm;
    if (s == "dyt") return SlotKind::dyt;
    if (s == "derf") return SlotKind::derf;
    if (s == "dynamic") return SlotKind::dynamic;
    throw ConfigError("unknown norm slot kind '" + s +
                      "' (expected layer_norm, rms_norm, dyt, derf, or dynamic)");
}

std::string to_string(FnTransform t) {
    switch (t) {
        case FnTransform::none: return "none";
        case FnTransform::shift_h: return "shift_h";
        case FnTransform::shift_v: return "shift_v";
        case FnTransform::clip: return "clip";
        case FnTransform::mix: return "mix";
        case FnTransform::flat: return "flat";
        case FnTransform::negated: return "negate";
        case FnTransform::scaled_tanh_fn: return "scaled_tanh";
    }
    return "?";
}

FnTransform fn_transform_from_string(const std::string& s) {
    if (s == "none") return FnTransform::none;
    if (s == "shift_h") return FnTransform::shift_h;
    if (s == "shift_v") return FnTransform::shift_v;
    if (s == "clip") return FnTransform::clip;
    if (s == "mix") return FnTransform::mix;
    if (s == "flat") return FnTransform::flat;
    if (s == "negate") return FnTransform::negated;
    if (s == "scaled_tanh") return FnTransform::scaled_tanh_fn;
    throw ConfigError("unknown function transform '" + s + "'");
}

PointwiseFn resolve_slot_fn(const SlotSpec& slot) {
    if (slot.kind == SlotKind::dyt) return find_fn("tanh");
    if (slot.kind == SlotKind::derf) return find_fn("erf");
    if (slot.transform == FnTransform::scaled_tanh_fn) return scaled_tanh(slot.transform_value);
    const PointwiseFn& base = find_fn(slot.fn_name);
    switch (slot.transform) {
        case FnTransform::none: return base;
        case FnTransform::shift_h: return shift(base, ShiftKind::horizontal, slot.transform_value);
        case FnTransform::shift_v: return shift(base, ShiftKind::vertical, slot.transform_value);
        case FnTransform::clip: return clip_bound(base, slot.transform_value);
        case FnTransform::mix: return mix_linear(base, slot.transform_value);
        case FnTransform::flat: return flat_zone(base, slot.transform_value);
        case FnTransform::negated: return negate(base);
        case FnTransform::scaled_tanh_fn: break;
    }
    return base;
}

std::string SlotSpec::label() const {
    if (kind != SlotKind::dynamic) return to_string(kind);
    std::string name = resolve_slot_fn(*this).name;
    std::string tag = "dynamic(" + name;
    if (s_mode != SMode::scalar) tag += ",s=" + to_string(s_mode);
    return tag + ")";
}

void ToyTransformerConfig::validate() const {
    std::vector<std::string> bad;
    if (depth < 1) bad.push_back("depth must be >= 1");
    if (d_model < 1) bad.push_back("d_model must be >= 1");
    if (n_heads < 1) {
        bad.push_back("n_heads must be >= 1");
    } else if (d_model % n_heads != 0) {
        bad.push_back("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
    }
    if (d_ff < 1) bad.push_back("d_ff must be >= 1");
    if (seq_len < 1) bad.push_back("seq_len must be >= 1");
    if (n_classes < 2) bad.push_back("n_classes must be >= 2");
    if (c_in < 1) bad.push_back("c_in must be >= 1");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) {
        bad.push_back("drop_path_rate must lie in [0, 1)");
    }
    if (!(norm_epsilon > 0.0)) bad.push_back("norm_epsilon must be positive");
    if (!std::isfinite(alpha0)) bad.push_back("alpha0 must be finite");
    if (norm_slot.kind == SlotKind::dynamic) {
        try {
            resolve_slot_fn(norm_slot);
        } catch (const Error& e) {
            bad.push_back(std::string("norm_slot: ") + e.what());
        }
    }
    if (!bad.empty()) {
        std::string msg = "invalid model config: " + bad[0];
        for (std::size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
        throw ConfigError(msg);
    }
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + ctx);
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& ctx) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(ctx + "." + key + ": wrong type");
    }
}

} // namespace

json config_to_json(const ToyTransformerConfig& cfg) {
    json slot = {
        {"kind", to_string(cfg.norm_slot.kind)},
        {"fn_name", cfg.norm_slot.fn_name},
        {"s_mode", to_string(cfg.norm_slot.s_mode)},
        {"transform", to_string(cfg.norm_slot.transform)},
        {"transform_value", cfg.norm_slot.transform_value},
    };
    return json{
        {"depth", cfg.depth},
        {"d_model", cfg.d_model},
        {"n_heads", cfg.n_heads},
        {"d_ff", cfg.d_ff},
        {"seq_len", cfg.seq_len},
        {"n_classes", cfg.n_classes},
        {"c_in", cfg.c_in},
        {"norm_slot", slot},
        {"drop_path_rate", cfg.drop_path_rate},
        {"norm_epsilon", cfg.norm_epsilon},
        {"alpha0", cfg.alpha0},
        {"seed", cfg.seed},
    };
}

ToyTransformerConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    check_keys(j,
               {"depth", "d_model", "n_heads", "d_ff", "seq_len", "n_classes", "c_in",
                "norm_slot", "drop_path_rate", "norm_epsilon", "alpha0", "seed"},
               "model");
    ToyTransformerConfig cfg;
    read_field(j, "depth", cfg.depth, "model");
    read_field(j, "d_model", cfg.d_model, "model");
    read_field(j, "n_heads", cfg.n_heads, "model");
    read_field(j, "d_ff", cfg.d_ff, "model");
    read_field(j, "seq_len", cfg.seq_len, "model");
    read_field(j, "n_classes", cfg.n_classes, "model");
    read_field(j, "c_in", cfg.c_in, "model");
    read_field(j, "drop_path_rate", cfg.drop_path_rate, "model");
    read_field(j, "norm_epsilon", cfg.norm_epsilon, "model");
    read_field(j, "alpha0", cfg.alpha0, "model");
    read_field(j, "seed", cfg.seed, "model");
    if (j.contains("norm_slot")) {
        const json& s = j.at("norm_slot");
        if (!s.is_object()) throw ConfigError("model.norm_slot must be a JSON object");
        check_keys(s, {"kind", "fn_name", "s_mode", "transform", "transform_value"},
                   "model.norm_slot");
        std::string kind = to_string(cfg.norm_slot.kind);
        std::string smode = to_string(cfg.norm_slot.s_mode);
        std::string transform = to_string(cfg.norm_slot.transform);
        read_field(s, "kind", kind, "model.norm_slot");
        read_field(s, "fn_name", cfg.norm_slot.fn_name, "model.norm_slot");
        read_field(s, "s_mode", smode, "model.norm_slot");
        read_field(s, "transform", transform, "model.norm_slot");
        read_field(s, "transform_value", cfg.norm_slot.transform_value, "model.norm_slot");
        cfg.norm_slot.kind = slot_kind_from_string(kind);
        cfg.norm_slot.s_mode = s_mode_from_string(smode);
        cfg.norm_slot.transform = fn_transform_from_string(transform);
    }
    return cfg;
}

ToyTransformer::ToyTransformer(ToyTransformerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    switch (cfg_.norm_slot.kind) {
        case SlotKind::layer_norm:
            slot_is_norm_ = true;
            slot_norm_kind_ = NormKind::layer_norm;
            break;
        case SlotKind::rms_norm:
            slot_is_norm_ = true;
            slot_norm_kind_ = NormKind::rms_norm;
            break;
        case SlotKind::dyt:
            slot_is_norm_ = false;
            slot_fn_ = resolve_slot_fn(cfg_.norm_slot);
            slot_s_mode_ = SMode::absent;
            break;
        case SlotKind::derf:
            slot_is_norm_ = false;
            slot_fn_ = resolve_slot_fn(cfg_.norm_slot);
            slot_s_mode_ = SMode::scalar;
            break;
        case SlotKind::dynamic:
            slot_is_norm_ = false;
            slot_fn_ = resolve_slot_fn(cfg_.norm_slot);
            slot_s_mode_ = cfg_.norm_slot.s_mode;
            break;
    }

    const std::size_t d = cfg_.d_model;
    Rng rng(cfg_.seed);
    auto tn = [&rng](Shape shape) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.truncated_normal(0.02);
        return t;
    };

    embed_w_ = add_param("embed.w", tn({cfg_.c_in, d}));
    embed_b_ = add_param("embed.b", Tensor::zeros({d}));
    pos_ = add_param("pos", tn({cfg_.seq_len, d}));
    for (std::size_t b = 0; b < cfg_.depth; ++b) {
        const std::string pre = "block" + std::to_string(b);
        BlockIdx blk;
        blk.norm1 = add_slot_params(pre + ".norm1");
        blk.wq = add_param(pre + ".attn.wq", tn({d, d}));
        blk.bq = add_param(pre + ".attn.bq", Tensor::zeros({d}));
        blk.wk = add_param(pre + ".attn.wk", tn({d, d}));
        blk.bk = add_param(pre + ".attn.bk", Tensor::zeros({d}));
        blk.wv = add_param(pre + ".attn.wv", tn({d, d}));
        blk.bv = add_param(pre + ".attn.bv", Tensor::zeros({d}));
        blk.wo = add_param(pre + ".attn.wo", tn({d, d}));
        blk.bo = add_param(pre + ".attn.bo", Tensor::zeros({d}));
        blk.norm2 = add_slot_params(pre + ".norm2");
        blk.w1 = add_param(pre + ".ffn.w1", tn({d, cfg_.d_ff}));
        blk.b1 = add_param(pre + ".ffn.b1", Tensor::zeros({cfg_.d_ff}));
        blk.w2 = add_param(pre + ".ffn.w2", tn({cfg_.d_ff, d}));
        blk.b2 = add_param(pre + ".ffn.b2", Tensor::zeros({d}));
        blocks_.push_back(blk);
    }
    final_norm_ = add_slot_params("final_norm");
    head_w_ = add_param("head.w", tn({d, cfg_.n_classes}));
    head_b_ = add_param("head.b", Tensor::zeros({cfg_.n_classes}));
}

std::size_t ToyTransformer::add_param(const std::string& name, Tensor value) {
    params_.push_back({name, std::move(value)});
    return params_.size() - 1;
}

// Slot parameters never touch the init RNG, so swapping the slot kind leaves
// every other weight bit-identical under the same seed.
ToyTransformer::SlotIdx ToyTransformer::add_slot_params(const std::string& prefix) {
    const std::size_t c = cfg_.d_model;
    SlotIdx idx;
    if (slot_is_norm_) {
        idx.gamma = add_param(prefix + ".gamma", Tensor::ones({c}));
        if (slot_norm_kind_ == NormKind::layer_norm) {
            idx.beta = add_param(prefix + ".beta", Tensor::zeros({c}));
        }
        return idx;
    }
    idx.alpha = add_param(prefix + ".alpha", Tensor::scalar(cfg_.alpha0));
    if (slot_s_mode_ == SMode::scalar) {
        idx.s = add_param(prefix + ".s", Tensor::zeros({1}));
    } else if (slot_s_mode_ == SMode::per_channel) {
        idx.s = add_param(prefix + ".s", Tensor::zeros({c}));
    }
    idx.gamma = add_param(prefix + ".gamma", Tensor::ones({c}));
    idx.beta = add_param(prefix + ".beta", Tensor::zeros({c}));
    return idx;
}

std::size_t ToyTransformer::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

Var ToyTransformer::slot_forward(Tape& tape, const std::vector<Var>& pv, const SlotIdx& idx,
                                 Var x) const {
    if (slot_is_norm_) {
        if (slot_norm_kind_ == NormKind::layer_norm) {
            return tape.layer_norm(x, pv[idx.gamma], pv[idx.beta], cfg_.norm_epsilon);
        }
        return tape.rms_norm(x, pv[idx.gamma], Var{}, cfg_.norm_epsilon);
    }
    const Var s = idx.s == Var::npos ? Var{} : pv[idx.s];
    return tape.dynamic_pointwise(x, pv[idx.alpha], s, pv[idx.gamma], pv[idx.beta],
                                  slot_fn_.value, slot_fn_.derivative, slot_fn_.name);
}

Var ToyTransformer::drop_path(Tape& tape, Var x, std::size_t batch, bool train_mode,
                              Rng& rng) const {
    const double rate = cfg_.drop_path_rate;
    if (!train_mode || rate == 0.0) return x;
    std::vector<double> factors(batch * cfg_.seq_len);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t b = 0; b < batch; ++b) {
        const double f = rng.uniform01() < rate ? 0.0 : keep_scale;
        for (std::size_t t = 0; t < cfg_.seq_len; ++t) factors[b * cfg_.seq_len + t] = f;
    }
    return tape.scale_rows(x, std::move(factors));
}

Var ToyTransformer::forward(Tape& tape, const ToyBatch& batch, bool train_mode, Rng& rng,
                            std::vector<Var>* bound) const {
    const Tensor& in = batch.inputs;
    if (in.ndim() != 3 || in.dim(1) != cfg_.seq_len || in.dim(2) != cfg_.c_in) {
        throw ShapeError("forward: inputs " + shape_to_string(in.shape()) +
                         " do not match [B, " + std::to_string(cfg_.seq_len) + ", " +
                         std::to_string(cfg_.c_in) + "]");
    }
    const std::size_t b = in.dim(0);
    if (!batch.labels.empty() && batch.labels.size() != b) {
        throw ShapeError("forward: " + std::to_string(batch.labels.size()) + " labels for " +
                         std::to_string(b) + " sequences");
    }

    std::vector<Var> pv;
    pv.reserve(params_.size());
    for (const auto& p : params_) pv.push_back(tape.leaf(p.value, true));
    if (bound) *bound = pv;

    const std::size_t t_len = cfg_.seq_len, d = cfg_.d_model, h = cfg_.n_heads;
    const std::size_t dh = d / h;

    Var x = tape.constant(in.reshaped({b * t_len, cfg_.c_in}));
    x = tape.add_rowvec(tape.matmul(x, pv[embed_w_]), pv[embed_b_]);
    std::vector<std::size_t> pos_idx(b * t_len);
    for (std::size_t r = 0; r < pos_idx.size(); ++r) pos_idx[r] = r % t_len;
    x = tape.add(x, tape.gather_rows(pv[pos_], std::move(pos_idx)));

    for (const BlockIdx& blk : blocks_) {
        // attention branch
        Var n1 = slot_forward(tape, pv, blk.norm1, x);
        Var q = tape.add_rowvec(tape.matmul(n1, pv[blk.wq]), pv[blk.bq]);
        Var k = tape.add_rowvec(tape.matmul(n1, pv[blk.wk]), pv[blk.bk]);
        Var v = tape.add_rowvec(tape.matmul(n1, pv[blk.wv]), pv[blk.bv]);
        Var qh = tape.split_heads(q, b, t_len, h);
        Var kh = tape.split_heads(k, b, t_len, h);
        Var vh = tape.split_heads(v, b, t_len, h);
        Var scores = tape.scale(tape.bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var probs = tape.softmax_lastdim(scores);
        Var ctx = tape.merge_heads(tape.bmm(probs, vh), b, t_len, h);
        Var attn = tape.add_rowvec(tape.matmul(ctx, pv[blk.wo]), pv[blk.bo]);
        x = tape.add(x, drop_path(tape, attn, b, train_mode, rng));

        // feed-forward branch
        Var n2 = slot_forward(tape, pv, blk.norm2, x);
        Var hidden = tape.add_rowvec(tape.matmul(n2, pv[blk.w1]), pv[blk.b1]);
        Var act = tape.unary(
            hidden, [](double u) { return gelu(u); }, [](double u) { return gelu_derivative(u); },
            "gelu");
        Var ff = tape.add_rowvec(tape.matmul(act, pv[blk.w2]), pv[blk.b2]);
        x = tape.add(x, drop_path(tape, ff, b, train_mode, rng));
    }

    Var fin = slot_forward(tape, pv, final_norm_, x);
    Var pooled = tape.mean_rows(fin, t_len);
    return tape.add_rowvec(tape.matmul(pooled, pv[head_w_]), pv[head_b_]);
}

std::vector<std::int64_t> ToyTransformer::predict(const ToyBatch& batch) const {
    Tape tape;
    Rng rng(0);  // eval mode draws nothing
    const Var logits = forward(tape, batch, false, rng);
    const Tensor& z = tape.value(logits);
    const std::size_t b = z.dim(0), k = z.dim(1);
    std::vector<std::int64_t> out(b);
    for (std::size_t r = 0; r < b; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (z[r * k + j] > z[r * k + best]) best = j;
        }
        out[r] = static_cast<std::int64_t>(best);
    }
    return out;
}

// --- checkpoint I/O -----------------------------------------------------

namespace {

void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const ToyTransformer& model, const std::string& path) {
    json manifest = json::array();
    std::uint64_t offset = 0;
    for (const auto& p : model.parameters()) {
        json shape = json::array();
        for (std::size_t d : p.value.shape()) shape.push_back(d);
        manifest.push_back({{"name", p.name}, {"shape", shape}, {"offset", offset}});
        offset += p.value.numel();
    }
    const json header = {
        {"format", "derfkit-checkpoint-v1"},
        {"config", config_to_json(model.config())},
        {"manifest", manifest},
    };
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint file for writing: " + path);
    out.write("DFKC", 4);
    write_u64_le(out, header_str.size());
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& p : model.parameters()) {
        out.write(reinterpret_cast<const char*>(p.value.data()),
                  static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

ToyTransformer load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint file: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "DFKC") {
        throw IoError("not a checkpoint file (bad magic): " + path);
    }
    const std::uint64_t header_len = read_u64_le(in);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw IoError("truncated checkpoint header: " + path);
    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
    }
    if (header.value("format", "") != "derfkit-checkpoint-v1") {
        throw IoError("unsupported checkpoint format in " + path);
    }

    ToyTransformer model(config_from_json(header.at("config")));
    const json& manifest = header.at("manifest");
    auto& params = model.parameters();
    if (manifest.size() != params.size()) {
        throw IoError("checkpoint manifest has " + std::to_string(manifest.size()) +
                      " entries, model has " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const json& entry = manifest.at(i);
        if (entry.at("name").get<std::string>() != params[i].name) {
            throw IoError("checkpoint manifest entry " + std::to_string(i) + " is '" +
                          entry.at("name").get<std::string>() + "', expected '" + params[i].name +
                          "'");
        }
        Shape shape;
        for (const auto& d : entry.at("shape")) shape.push_back(d.get<std::size_t>());
        if (shape != params[i].value.shape()) {
            throw IoError("checkpoint shape mismatch for '" + params[i].name + "'");
        }
    }
    for (auto& p : params) {
        in.read(reinterpret_cast<char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
    }
    if (!in) throw IoError("truncated checkpoint blob: " + path);
    return model;
}

} // namespace derfkit
