#include "derfkit/harness.hpp"

#include "derfkit/errors.hpp"
#include "derfkit/funcs.hpp"
#include "derfkit/version.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <sstream>
#include <thread>

namespace derfkit {

using nlohmann::json;

void TrainSpec::validate() const {
    model.validate();
    optimizer.validate();
    dataset.validate();
    std::vector<std::string> bad;
    if (steps < 1) bad.push_back("steps must be >= 1");
    if (batch_size < 1) bad.push_back("batch_size must be >= 1");
    if (!(divergence_factor > 1.0)) bad.push_back("divergence_factor must exceed 1");
    if (target_val_accuracy > 0.0 && eval_every == 0) {
        bad.push_back("target_val_accuracy needs eval_every > 0");
    }
    if (!(target_val_accuracy >= 0.0 && target_val_accuracy <= 1.0)) {
        bad.push_back("target_val_accuracy must lie in [0, 1]");
    }
    if (!bad.empty()) {
        std::string msg = "invalid train spec: " + bad[0];
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

json optimizer_to_json(const AdamWConfig& opt) {
    return json{
        {"kind", "adamw"}, {"lr", opt.lr},   {"beta1", opt.beta1},
        {"beta2", opt.beta2}, {"eps", opt.eps}, {"weight_decay", opt.weight_decay},
    };
}

AdamWConfig optimizer_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("optimizer config must be a JSON object");
    check_keys(j, {"kind", "lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
    std::string kind = "adamw";
    read_field(j, "kind", kind, "optimizer");
    if (kind != "adamw") throw ConfigError("optimizer.kind: only adamw is available");
    AdamWConfig opt;
    read_field(j, "lr", opt.lr, "optimizer");
    read_field(j, "beta1", opt.beta1, "optimizer");
    read_field(j, "beta2", opt.beta2, "optimizer");
    read_field(j, "eps", opt.eps, "optimizer");
    read_field(j, "weight_decay", opt.weight_decay, "optimizer");
    return opt;
}

} // namespace

json train_spec_to_json(const TrainSpec& spec) {
    return json{
        {"model", config_to_json(spec.model)},
        {"optimizer", optimizer_to_json(spec.optimizer)},
        {"steps", spec.steps},
        {"batch_size", spec.batch_size},
        {"warmup_steps", spec.warmup_steps},
        {"lr_schedule", to_string(spec.lr_schedule)},
        {"dataset", dataset_spec_to_json(spec.dataset)},
        {"dataset_path", spec.dataset_path},
        {"master_seed", spec.master_seed},
        {"eval_every", spec.eval_every},
        {"target_val_accuracy", spec.target_val_accuracy},
        {"eval_mode_max_batches", spec.eval_mode_max_batches},
        {"divergence_factor", spec.divergence_factor},
    };
}

TrainSpec train_spec_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("train spec must be a JSON object");
    check_keys(j,
               {"model", "optimizer", "steps", "batch_size", "warmup_steps", "lr_schedule",
                "dataset", "dataset_path", "master_seed", "eval_every", "target_val_accuracy",
                "eval_mode_max_batches", "divergence_factor"},
               "train");
    TrainSpec spec;
    if (j.contains("model")) spec.model = config_from_json(j.at("model"));
    if (j.contains("optimizer")) spec.optimizer = optimizer_from_json(j.at("optimizer"));
    read_field(j, "steps", spec.steps, "train");
    read_field(j, "batch_size", spec.batch_size, "train");
    read_field(j, "warmup_steps", spec.warmup_steps, "train");
    std::string sched = to_string(spec.lr_schedule);
    read_field(j, "lr_schedule", sched, "train");
    spec.lr_schedule = lr_schedule_from_string(sched);
    if (j.contains("dataset")) spec.dataset = dataset_spec_from_json(j.at("dataset"));
    read_field(j, "dataset_path", spec.dataset_path, "train");
    read_field(j, "master_seed", spec.master_seed, "train");
    read_field(j, "eval_every", spec.eval_every, "train");
    read_field(j, "target_val_accuracy", spec.target_val_accuracy, "train");
    read_field(j, "eval_mode_max_batches", spec.eval_mode_max_batches, "train");
    read_field(j, "divergence_factor", spec.divergence_factor, "train");
    return spec;
}

json trial_result_to_json(const TrialResult& r, bool with_sweep) {
    json j{
        {"trial_id", r.trial_id},
        {"function_name", r.function_name},
        {"final_train_loss", r.final_train_loss},
        {"eval_mode_train_loss", r.eval_mode_train_loss},
        {"val_accuracy", r.val_accuracy},
        {"diverged", r.diverged},
        {"steps_completed", r.steps_completed},
    };
    if (with_sweep) {
        j["sweep_kind"] = r.sweep_kind;
        j["sweep_value"] = r.sweep_value;
    }
    return j;
}

namespace {

void check_dataset_matches(const ToyTransformerConfig& cfg, const Dataset& ds,
                           const char* what) {
    if (ds.spec.seq_len != cfg.seq_len || ds.spec.c_in != cfg.c_in) {
        throw ContractError(std::string(what) + ": dataset rows are [" +
                            std::to_string(ds.spec.seq_len) + ", " +
                            std::to_string(ds.spec.c_in) + "], model wants [" +
                            std::to_string(cfg.seq_len) + ", " + std::to_string(cfg.c_in) + "]");
    }
    if (ds.spec.n_classes > cfg.n_classes) {
        throw ContractError(std::string(what) + ": dataset has " +
                            std::to_string(ds.spec.n_classes) + " classes, model head only " +
                            std::to_string(cfg.n_classes));
    }
}

double batch_loss(const ToyTransformer& model, const ToyBatch& batch, bool train_mode,
                  Rng& rng) {
    Tape tape;
    Var loss = tape.softmax_cross_entropy(model.forward(tape, batch, train_mode, rng),
                                          batch.labels);
    return tape.value(loss).item();
}

} // namespace

double eval_mode_train_loss(const ToyTransformer& model, const Dataset& dataset,
                            std::size_t batch_size, std::size_t max_batches) {
    check_dataset_matches(model.config(), dataset, "eval_mode_train_loss");
    const std::size_t n_train = dataset.train_count();
    if (n_train == 0) throw ContractError("eval_mode_train_loss: empty training split");
    if (batch_size == 0 || batch_size > n_train) batch_size = n_train;

    Rng unused(0);
    double weighted = 0.0;
    std::size_t counted = 0, batches = 0;
    for (std::size_t first = 0; first < n_train; first += batch_size) {
        if (max_batches > 0 && batches == max_batches) break;
        const std::size_t count = std::min(batch_size, n_train - first);
        const double loss = batch_loss(model, dataset.slice(first, count), false, unused);
        weighted += loss * static_cast<double>(count);
        counted += count;
        ++batches;
    }
    return weighted / static_cast<double>(counted);
}

double train_mode_loss(const ToyTransformer& model, const Dataset& dataset,
                       std::size_t batch_size, std::uint64_t seed,
                       std::size_t max_batches) {
    check_dataset_matches(model.config(), dataset, "train_mode_loss");
    const std::size_t n_train = dataset.train_count();
    if (n_train == 0) throw ContractError("train_mode_loss: empty training split");
    if (batch_size == 0 || batch_size > n_train) batch_size = n_train;

    Rng rng(seed);
    double weighted = 0.0;
    std::size_t counted = 0, batches = 0;
    for (std::size_t first = 0; first < n_train; first += batch_size) {
        if (max_batches > 0 && batches == max_batches) break;
        const std::size_t count = std::min(batch_size, n_train - first);
        const double loss = batch_loss(model, dataset.slice(first, count), true, rng);
        weighted += loss * static_cast<double>(count);
        counted += count;
        ++batches;
    }
    return weighted / static_cast<double>(counted);
}

double validation_accuracy(const ToyTransformer& model, const Dataset& dataset) {
    check_dataset_matches(model.config(), dataset, "validation_accuracy");
    const std::size_t n_val = dataset.val_count();
    if (n_val == 0) return 0.0;
    const std::size_t chunk = 256;
    std::size_t correct = 0;
    for (std::size_t off = 0; off < n_val; off += chunk) {
        const std::size_t count = std::min(chunk, n_val - off);
        const ToyBatch batch = dataset.slice(dataset.train_count() + off, count);
        const auto pred = model.predict(batch);
        for (std::size_t i = 0; i < count; ++i) {
            if (pred[i] == batch.labels[i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n_val);
}

TrainOutput train(const TrainSpec& spec, const Dataset& dataset) {
    spec.validate();
    check_dataset_matches(spec.model, dataset, "train");
    const std::size_t n_train = dataset.train_count();
    if (n_train < spec.batch_size) {
        throw ConfigError("train: batch_size " + std::to_string(spec.batch_size) +
                          " exceeds the training split (" + std::to_string(n_train) + " rows)");
    }

    const auto t0 = std::chrono::steady_clock::now();
    ToyTransformer model(spec.model);
    AdamW opt(spec.optimizer, model.parameters());
    Rng rng(spec.master_seed);

    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    const std::size_t batches_per_epoch = n_train / spec.batch_size;

    std::vector<double> curve;
    curve.reserve(spec.steps);
    bool diverged = false;
    std::size_t step = 0;
    while (step < spec.steps && !diverged) {
        rng.shuffle(order);
        for (std::size_t bi = 0; bi < batches_per_epoch && step < spec.steps; ++bi, ++step) {
            std::vector<std::size_t> rows(order.begin() + bi * spec.batch_size,
                                          order.begin() + (bi + 1) * spec.batch_size);
            const ToyBatch batch = dataset.gather(rows);

            Tape tape;
            std::vector<Var> bound;
            Var logits = model.forward(tape, batch, true, rng, &bound);
            Var loss_var = tape.softmax_cross_entropy(logits, batch.labels);
            const double loss = tape.value(loss_var).item();
            curve.push_back(loss);

            // divergence: non-finite, or blowing past the 10th-step reference
            const double ref = curve.size() >= 10 ? curve[9] : curve[0];
            if (!std::isfinite(loss) ||
                (curve.size() >= 2 && loss > spec.divergence_factor * ref)) {
                diverged = true;
                ++step;
                break;
            }

            tape.backward(loss_var);
            std::vector<const Tensor*> grads;
            grads.reserve(bound.size());
            for (Var v : bound) grads.push_back(&tape.grad(v));
            opt.step(model.parameters(), grads,
                     lr_at(spec.optimizer.lr, spec.lr_schedule, step, spec.steps,
                           spec.warmup_steps));

            if (spec.eval_every > 0 && spec.target_val_accuracy > 0.0 &&
                (step + 1) % spec.eval_every == 0 && step + 1 < spec.steps) {
                if (validation_accuracy(model, dataset) >= spec.target_val_accuracy) {
                    ++step;
                    goto done;
                }
            }
        }
    }
done:
    TrialResult result;
    result.final_train_loss = curve.back();
    result.eval_mode_train_loss =
        eval_mode_train_loss(model, dataset, spec.batch_size, spec.eval_mode_max_batches);
    result.val_accuracy = validation_accuracy(model, dataset);
    result.diverged = diverged;
    result.steps_completed = step;
    result.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return TrainOutput{std::move(result), std::move(curve), std::move(model)};
}

TrainOutput train(const TrainSpec& spec) {
    spec.validate();
    const Dataset dataset = spec.dataset_path.empty() ? make_synthetic_dataset(spec.dataset)
                                                      : load_dataset(spec.dataset_path);
    return train(spec, dataset);
}

// --- experiments ---------------------------------------------------------

std::string to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::search: return "search";
        case ExperimentKind::shift_sweep: return "shift_sweep";
        case ExperimentKind::bound_sweep: return "bound_sweep";
        case ExperimentKind::mix_sweep: return "mix_sweep";
        case ExperimentKind::flat_sweep: return "flat_sweep";
        case ExperimentKind::monotonic_compare: return "monotonic_compare";
        case ExperimentKind::growth_probe: return "growth_probe";
        case ExperimentKind::s_ablation: return "s_ablation";
        case ExperimentKind::eps_tanh_compare: return "eps_tanh_compare";
        case ExperimentKind::fitloss: return "fitloss";
    }
    return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
    for (ExperimentKind k :
         {ExperimentKind::search, ExperimentKind::shift_sweep, ExperimentKind::bound_sweep,
          ExperimentKind::mix_sweep, ExperimentKind::flat_sweep,
          ExperimentKind::monotonic_compare, ExperimentKind::growth_probe,
          ExperimentKind::s_ablation, ExperimentKind::eps_tanh_compare,
          ExperimentKind::fitloss}) {
        if (s == to_string(k)) return k;
    }
    throw ConfigError("unknown experiment kind '" + s + "'");
}

void ExperimentSpec::validate() const {
    base.validate();
    if (repeats < 1) throw ConfigError("invalid experiment spec: repeats must be >= 1");
    if (kind == ExperimentKind::shift_sweep && shift_type != "horizontal" &&
        shift_type != "vertical") {
        throw ConfigError("invalid experiment spec: shift_type must be horizontal or vertical");
    }
    expand_grid(*this);  // surfaces bad grids (unknown names, illegal lambdas) up front
}

json experiment_spec_to_json(const ExperimentSpec& spec) {
    return json{
        {"kind", to_string(spec.kind)},
        {"base", train_spec_to_json(spec.base)},
        {"functions", spec.functions},
        {"lambdas", spec.lambdas},
        {"shift_type", spec.shift_type},
        {"base_fn", spec.base_fn},
        {"s_modes", spec.s_modes},
        {"repeats", spec.repeats},
    };
}

ExperimentSpec experiment_spec_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("experiment spec must be a JSON object");
    check_keys(j,
               {"kind", "base", "functions", "lambdas", "shift_type", "base_fn", "s_modes",
                "repeats"},
               "experiment");
    ExperimentSpec spec;
    std::string kind = to_string(spec.kind);
    read_field(j, "kind", kind, "experiment");
    spec.kind = experiment_kind_from_string(kind);
    if (j.contains("base")) spec.base = train_spec_from_json(j.at("base"));
    read_field(j, "functions", spec.functions, "experiment");
    read_field(j, "lambdas", spec.lambdas, "experiment");
    read_field(j, "shift_type", spec.shift_type, "experiment");
    read_field(j, "base_fn", spec.base_fn, "experiment");
    read_field(j, "s_modes", spec.s_modes, "experiment");
    read_field(j, "repeats", spec.repeats, "experiment");
    return spec;
}

namespace {

SlotSpec dynamic_slot(const std::string& fn, SMode s_mode = SMode::scalar,
                      FnTransform transform = FnTransform::none, double value = 0.0) {
    SlotSpec slot;
    slot.kind = SlotKind::dynamic;
    slot.fn_name = fn;
    slot.s_mode = s_mode;
    slot.transform = transform;
    slot.transform_value = value;
    return slot;
}

// Slot-or-function entry: fitloss grids mix norm kinds with catalog names.
SlotSpec parse_slot_entry(const std::string& entry) {
    for (SlotKind k : {SlotKind::layer_norm, SlotKind::rms_norm, SlotKind::dyt, SlotKind::derf}) {
        if (entry == to_string(k)) {
            SlotSpec slot;
            slot.kind = k;
            return slot;
        }
    }
    return dynamic_slot(entry);
}

std::vector<std::string> search_default_functions() {
    std::vector<std::string> out;
    for (const PointwiseFn& f : catalog()) {
        if (f.search_candidate) out.push_back(f.name);
    }
    return out;
}

} // namespace

std::vector<TrialPoint> expand_grid(const ExperimentSpec& spec) {
    std::vector<TrialPoint> points;
    auto add = [&points](std::string label, SlotSpec slot, std::string sweep_kind = "",
                         double sweep_value = 0.0) {
        points.push_back({std::move(label), std::move(slot), std::move(sweep_kind), sweep_value});
    };

    switch (spec.kind) {
        case ExperimentKind::search: {
            auto fns = spec.functions.empty() ? search_default_functions() : spec.functions;
            for (const auto& fn : fns) add(fn, dynamic_slot(fn));
            break;
        }
        case ExperimentKind::shift_sweep: {
            const std::string fn = spec.base_fn.empty() ? "erf" : spec.base_fn;
            const bool horizontal = spec.shift_type == "horizontal";
            auto ls = spec.lambdas.empty()
                          ? std::vector<double>{-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0}
                          : spec.lambdas;
            for (double l : ls) {
                SlotSpec slot = dynamic_slot(
                    fn, SMode::scalar,
                    horizontal ? FnTransform::shift_h : FnTransform::shift_v, l);
                add(resolve_slot_fn(slot).name, slot,
                    horizontal ? "lambda_shift_h" : "lambda_shift_v", l);
            }
            break;
        }
        case ExperimentKind::bound_sweep: {
            const std::string fn = spec.base_fn.empty() ? "linear" : spec.base_fn;
            auto ls = spec.lambdas.empty() ? std::vector<double>{0.5, 0.8, 1.0, 2.0, 3.0, 5.0}
                                           : spec.lambdas;
            for (double l : ls) {
                SlotSpec slot = dynamic_slot(fn, SMode::scalar, FnTransform::clip, l);
                add(resolve_slot_fn(slot).name, slot, "lambda_u", l);
            }
            break;
        }
        case ExperimentKind::mix_sweep: {
            const std::string fn = spec.base_fn.empty() ? "erf" : spec.base_fn;
            auto ls = spec.lambdas.empty() ? std::vector<double>{0.01, 0.1, 0.5} : spec.lambdas;
            for (double l : ls) {
                SlotSpec slot = dynamic_slot(fn, SMode::scalar, FnTransform::mix, l);
                add(resolve_slot_fn(slot).name, slot, "lambda_b", l);
            }
            break;
        }
        case ExperimentKind::flat_sweep: {
            const std::string fn = spec.base_fn.empty() ? "erf" : spec.base_fn;
            auto ls = spec.lambdas.empty() ? std::vector<double>{0.1, 0.5, 1.0, 2.0, 3.0}
                                           : spec.lambdas;
            for (double l : ls) {
                SlotSpec slot = dynamic_slot(fn, SMode::scalar, FnTransform::flat, l);
                add(resolve_slot_fn(slot).name, slot, "lambda_flat", l);
            }
            break;
        }
        case ExperimentKind::monotonic_compare: {
            auto fns = spec.functions.empty() ? std::vector<std::string>{"erf"} : spec.functions;
            for (const auto& fn : fns) {
                add(fn, dynamic_slot(fn));
                SlotSpec neg = dynamic_slot(fn, SMode::scalar, FnTransform::negated);
                add(resolve_slot_fn(neg).name, neg);
            }
            break;
        }
        case ExperimentKind::growth_probe: {
            auto fns = spec.functions.empty()
                           ? std::vector<std::string>{"arcsinh", "logsign", "logquad",
                                                      "power23", "linear"}
                           : spec.functions;
            for (const auto& fn : fns) add(fn, dynamic_slot(fn));
            break;
        }
        case ExperimentKind::s_ablation: {
            const std::string fn = spec.base_fn.empty() ? "erf" : spec.base_fn;
            auto modes = spec.s_modes.empty()
                             ? std::vector<std::string>{"absent", "scalar", "per_channel"}
                             : spec.s_modes;
            for (const auto& m : modes) {
                add(fn + ",s=" + m, dynamic_slot(fn, s_mode_from_string(m)), "s_mode", 0.0);
            }
            break;
        }
        case ExperimentKind::eps_tanh_compare: {
            auto ls = spec.lambdas.empty() ? std::vector<double>{1.0, 1.205} : spec.lambdas;
            for (double l : ls) {
                SlotSpec slot = dynamic_slot("tanh", SMode::scalar,
                                             FnTransform::scaled_tanh_fn, l);
                add(resolve_slot_fn(slot).name, slot, "eps_tanh", l);
            }
            // the reference the scaled-tanh family is fit to
            SlotSpec erf_slot;
            erf_slot.kind = SlotKind::derf;
            add("derf", erf_slot);
            break;
        }
        case ExperimentKind::fitloss: {
            auto entries = spec.functions.empty()
                               ? std::vector<std::string>{"layer_norm", "dyt", "derf"}
                               : spec.functions;
            for (const auto& e : entries) add(e, parse_slot_entry(e));
            break;
        }
    }

    for (auto& p : points) {
        if (p.slot.kind == SlotKind::dynamic) resolve_slot_fn(p.slot);  // fail fast
    }
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t j = i + 1; j < points.size(); ++j) {
            if (points[i].point == points[j].point) {
                throw ConfigError("experiment grid repeats the point '" + points[i].point + "'");
            }
        }
    }
    if (points.empty()) throw ConfigError("experiment grid is empty");
    return points;
}

namespace {

std::size_t thread_budget(std::size_t max_threads, std::size_t n_trials) {
    std::size_t n = max_threads;
    if (n == 0) {
        if (const char* env = std::getenv("DERFKIT_THREADS")) {
            char* end = nullptr;
            const unsigned long parsed = std::strtoul(env, &end, 10);
            if (end && *end == '\0' && parsed > 0) n = parsed;
        }
    }
    if (n == 0) n = std::max<std::size_t>(std::thread::hardware_concurrency(), 1);
    return std::min(n, n_trials);
}

struct PointStats {
    std::string point;
    std::size_t repeats = 0;
    std::size_t diverged_count = 0;
    std::vector<double> val_accs, eval_losses;  // non-diverged repeats only
};

json make_ranking(const std::vector<TrialResult>& trials,
                  const std::vector<TrialPoint>& grid, ExperimentKind kind) {
    std::vector<PointStats> stats;
    for (const auto& p : grid) stats.push_back({p.point, 0, 0, {}, {}});
    for (const auto& t : trials) {
        const std::string point = t.trial_id.substr(0, t.trial_id.rfind("/r"));
        for (auto& s : stats) {
            if (s.point != point) continue;
            ++s.repeats;
            if (t.diverged) {
                ++s.diverged_count;
            } else {
                s.val_accs.push_back(t.val_accuracy);
                s.eval_losses.push_back(t.eval_mode_train_loss);
            }
            break;
        }
    }

    auto mean_of = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    auto range_of = [](const std::vector<double>& v) {
        return *std::max_element(v.begin(), v.end()) - *std::min_element(v.begin(), v.end());
    };

    struct Row {
        json j;
        bool has_key;
        double key;
        std::string point;
    };
    std::vector<Row> rows;
    for (const auto& s : stats) {
        json j{{"point", s.point},
               {"repeats", s.repeats},
               {"diverged_count", s.diverged_count}};
        bool has_key = !s.val_accs.empty();
        double key = 0.0;
        if (has_key) {
            j["mean_val_accuracy"] = mean_of(s.val_accs);
            j["val_accuracy_range"] = range_of(s.val_accs);
            j["mean_eval_mode_train_loss"] = mean_of(s.eval_losses);
            j["eval_mode_train_loss_range"] = range_of(s.eval_losses);
            // fitloss ranks by fitting capacity; everything else by accuracy
            key = kind == ExperimentKind::fitloss ? -mean_of(s.eval_losses)
                                                  : mean_of(s.val_accs);
            if (!std::isfinite(key)) has_key = false;
        } else {
            j["mean_val_accuracy"] = nullptr;
            j["val_accuracy_range"] = nullptr;
            j["mean_eval_mode_train_loss"] = nullptr;
            j["eval_mode_train_loss_range"] = nullptr;
        }
        rows.push_back({std::move(j), has_key, key, s.point});
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.has_key != b.has_key) return a.has_key;  // divergent-only points sink
        if (a.has_key && a.key != b.key) return a.key > b.key;
        return a.point < b.point;
    });
    json ranking = json::array();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i].j["rank"] = i + 1;
        ranking.push_back(std::move(rows[i].j));
    }
    return ranking;
}

} // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec, std::size_t max_threads) {
    spec.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<TrialPoint> grid = expand_grid(spec);
    const Dataset dataset = spec.base.dataset_path.empty()
                                ? make_synthetic_dataset(spec.base.dataset)
                                : load_dataset(spec.base.dataset_path);

    struct Job {
        std::string trial_id;
        const TrialPoint* point;
    };
    std::vector<Job> jobs;
    for (const auto& p : grid) {
        for (std::size_t r = 0; r < spec.repeats; ++r) {
            jobs.push_back({p.point + "/r" + std::to_string(r), &p});
        }
    }

    std::vector<TrialResult> results(jobs.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                const Job& job = jobs[i];
                TrainSpec ts = spec.base;
                ts.model.norm_slot = job.point->slot;
                const std::uint64_t trial_seed =
                    seed::derive(spec.base.master_seed, job.trial_id);
                ts.model.seed = seed::derive(trial_seed, "init");
                ts.master_seed = seed::derive(trial_seed, "train");
                TrainOutput out = train(ts, dataset);
                out.result.trial_id = job.trial_id;
                out.result.function_name = job.point->point;
                out.result.sweep_kind = job.point->sweep_kind;
                out.result.sweep_value = job.point->sweep_value;
                results[i] = std::move(out.result);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };

    const std::size_t n_threads = thread_budget(max_threads, jobs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    std::sort(results.begin(), results.end(),
              [](const TrialResult& a, const TrialResult& b) { return a.trial_id < b.trial_id; });

    const bool with_sweep = !grid.front().sweep_kind.empty();
    json trials = json::array();
    for (const auto& r : results) trials.push_back(trial_result_to_json(r, with_sweep));

    json grid_json = json::array();
    for (const auto& p : grid) grid_json.push_back(p.point);

    ExperimentResult out;
    out.report = json{
        {"experiment_kind", to_string(spec.kind)},
        {"master_seed", spec.base.master_seed},
        {"grid", grid_json},
        {"repeats", spec.repeats},
        {"trials", trials},
        {"ranking", make_ranking(results, grid, spec.kind)},
        {"config", experiment_spec_to_json(spec)},
        {"version", kVersion},
        {"catalog_hash", catalog_hash()},
    };
    out.trials = std::move(results);
    out.total_wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

std::string report_to_csv(const nlohmann::json& report) {
    std::ostringstream out;
    const json& trials = report.at("trials");
    const bool with_sweep = !trials.empty() && trials.front().contains("sweep_kind");
    out << "trial_id,function_name,";
    if (with_sweep) out << "sweep_kind,sweep_value,";
    out << "final_train_loss,eval_mode_train_loss,val_accuracy,diverged,steps_completed\n";
    auto num = [](const json& v) {
        if (v.is_null()) return std::string("nan");
        std::ostringstream s;
        s.precision(17);
        s << v.get<double>();
        return s.str();
    };
    for (const auto& t : trials) {
        out << t.at("trial_id").get<std::string>() << ','
            << t.at("function_name").get<std::string>() << ',';
        if (with_sweep) {
            out << t.at("sweep_kind").get<std::string>() << ',' << num(t.at("sweep_value"))
                << ',';
        }
        out << num(t.at("final_train_loss")) << ',' << num(t.at("eval_mode_train_loss")) << ','
            << num(t.at("val_accuracy")) << ',' << (t.at("diverged").get<bool>() ? 1 : 0) << ','
            << t.at("steps_completed").get<std::size_t>() << '\n';
    }
    return out.str();
}

} // namespace derfkit
