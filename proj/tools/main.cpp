#include <derfkit.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int exit_code_for(derfkit_status s) {
    switch (s) {
        case DERFKIT_OK: return 0;
        case DERFKIT_ERR_NOT_FOUND: return 2;
        case DERFKIT_ERR_INVALID_ARGUMENT:
        case DERFKIT_ERR_SHAPE:
        case DERFKIT_ERR_PARAMETER:
        case DERFKIT_ERR_CONTRACT:
        case DERFKIT_ERR_CONFIG: return 3;
        case DERFKIT_ERR_IO: return 4;
        default: return 1;
    }
}

[[noreturn]] void die(derfkit_status s) {
    std::cerr << "error: " << derfkit_last_error() << "\n";
    std::exit(exit_code_for(s));
}

[[noreturn]] void die_config(const std::string& msg) {
    std::cerr << "error: " << msg << "\n";
    std::exit(3);
}

[[noreturn]] void die_io(const std::string& msg) {
    std::cerr << "error: " << msg << "\n";
    std::exit(4);
}

// Returns the out-string from a C API call, freeing the C buffer.
template <typename Call>
std::string call_string(Call&& call) {
    char* out = nullptr;
    const derfkit_status s = call(&out);
    if (s != DERFKIT_OK) die(s);
    std::string result(out);
    derfkit_string_free(out);
    return result;
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) die_io("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        die_config("config file " + path + ": invalid JSON: " + e.what());
    }
}

// Sets cfg["a"]["b"]["c"] = value for path "a.b.c".
void set_path(json& cfg, const std::string& path, json value) {
    json* node = &cfg;
    std::size_t start = 0;
    for (;;) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (dot == std::string::npos) {
            (*node)[key] = std::move(value);
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) die_io("cannot write " + path.string());
    out << content;
    if (!out) die_io("failed writing " + path.string());
}

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void print_ranking(const json& report) {
    const json& ranking = report.at("ranking");
    const bool by_loss = report.at("experiment_kind") == "fitloss";
    std::printf("%-4s %-28s %-22s %-22s %s\n", "rank", "point",
                by_loss ? "eval_loss (range)" : "val_acc (range)",
                by_loss ? "val_acc (range)" : "eval_loss (range)", "diverged");
    for (const auto& row : ranking) {
        auto cell = [&row](const char* mean_key, const char* range_key) {
            if (row.at(mean_key).is_null()) return std::string("x");
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.4f (%.4f)", row.at(mean_key).get<double>(),
                          row.at(range_key).get<double>());
            return std::string(buf);
        };
        const std::string acc = cell("mean_val_accuracy", "val_accuracy_range");
        const std::string loss = cell("mean_eval_mode_train_loss", "eval_mode_train_loss_range");
        std::printf("%-4zu %-28s %-22s %-22s %zu/%zu\n", row.at("rank").get<std::size_t>(),
                    row.at("point").get<std::string>().c_str(),
                    by_loss ? loss.c_str() : acc.c_str(), by_loss ? acc.c_str() : loss.c_str(),
                    row.at("diverged_count").get<std::size_t>(),
                    row.at("repeats").get<std::size_t>());
    }
}

// Flags shared by every training-backed command; they override config keys.
struct TrainFlags {
    std::string config_path;
    std::string out_dir = "out";
    std::string dataset_path;
    bool gen_dataset = false;
    int threads = 0;
    // base/train overrides; -1 sentinels mean "not set"
    long long steps = -1, batch_size = -1, warmup = -1, eval_every = -1;
    double lr = -1.0, target_acc = -1.0, drop_path = -1.0;
    long long master_seed = -1;
    std::string lr_schedule, slot, fn, s_mode;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON config file");
    cmd->add_option("--out-dir", f.out_dir, "output directory");
    cmd->add_option("--dataset", f.dataset_path, "dataset file (DFK1)");
    cmd->add_flag("--gen", f.gen_dataset, "generate the dataset into the output directory");
    cmd->add_option("--threads", f.threads, "max concurrent trials (default: DERFKIT_THREADS)");
    cmd->add_option("--steps", f.steps, "training steps");
    cmd->add_option("--batch-size", f.batch_size);
    cmd->add_option("--warmup-steps", f.warmup);
    cmd->add_option("--lr", f.lr, "AdamW learning rate");
    cmd->add_option("--lr-schedule", f.lr_schedule, "constant or cosine");
    cmd->add_option("--master-seed", f.master_seed);
    cmd->add_option("--eval-every", f.eval_every, "validation cadence in steps");
    cmd->add_option("--target-val-accuracy", f.target_acc, "early-stop threshold");
    cmd->add_option("--drop-path", f.drop_path, "stochastic depth rate");
    cmd->add_option("--slot", f.slot, "norm slot: layer_norm|rms_norm|dyt|derf|dynamic");
    cmd->add_option("--fn", f.fn, "catalog function for the dynamic slot");
    cmd->add_option("--s-mode", f.s_mode, "shift parameter mode: absent|scalar|per_channel");
}

// prefix is "" for train configs and "base." for experiment configs.
void apply_train_flags(json& cfg, const TrainFlags& f, const std::string& prefix) {
    if (f.steps >= 0) set_path(cfg, prefix + "steps", f.steps);
    if (f.batch_size >= 0) set_path(cfg, prefix + "batch_size", f.batch_size);
    if (f.warmup >= 0) set_path(cfg, prefix + "warmup_steps", f.warmup);
    if (f.eval_every >= 0) set_path(cfg, prefix + "eval_every", f.eval_every);
    if (f.lr >= 0.0) set_path(cfg, prefix + "optimizer.lr", f.lr);
    if (!f.lr_schedule.empty()) set_path(cfg, prefix + "lr_schedule", f.lr_schedule);
    if (f.master_seed >= 0) set_path(cfg, prefix + "master_seed", f.master_seed);
    if (f.target_acc >= 0.0) set_path(cfg, prefix + "target_val_accuracy", f.target_acc);
    if (f.drop_path >= 0.0) set_path(cfg, prefix + "model.drop_path_rate", f.drop_path);
    if (!f.slot.empty()) set_path(cfg, prefix + "model.norm_slot.kind", f.slot);
    if (!f.fn.empty()) set_path(cfg, prefix + "model.norm_slot.fn_name", f.fn);
    if (!f.s_mode.empty()) set_path(cfg, prefix + "model.norm_slot.s_mode", f.s_mode);
    if (!f.dataset_path.empty()) set_path(cfg, prefix + "dataset_path", f.dataset_path);
}

// Resolves --gen: writes the dataset file under out_dir and points the spec
// at it, so the exact bytes used are preserved next to the reports.
void maybe_generate_dataset(json& cfg, const TrainFlags& f, const std::string& prefix) {
    if (!f.gen_dataset) return;
    fs::create_directories(f.out_dir);
    json ds_spec = json::object();
    if (prefix.empty()) {
        if (cfg.contains("dataset")) ds_spec = cfg.at("dataset");
    } else if (cfg.contains("base") && cfg.at("base").contains("dataset")) {
        ds_spec = cfg.at("base").at("dataset");
    }
    const std::string path = (fs::path(f.out_dir) / "dataset.dfk").string();
    const derfkit_status s = derfkit_dataset_generate(ds_spec.dump().c_str(), path.c_str());
    if (s != DERFKIT_OK) die(s);
    set_path(cfg, prefix + "dataset_path", path);
    std::printf("wrote %s\n", path.c_str());
}

void write_experiment_outputs(const std::string& report_str, const std::string& out_dir,
                              const std::string& stem) {
    fs::create_directories(out_dir);
    json report = json::parse(report_str);
    const double wall = report.value("wall_time", 0.0);
    report.erase("wall_time");

    const fs::path dir(out_dir);
    write_file(dir / (stem + ".json"), report.dump(2) + "\n");
    const std::string csv = call_string([&report](char** out) {
        return derfkit_report_csv(report.dump().c_str(), out);
    });
    write_file(dir / (stem + ".csv"), csv);
    const json meta{{"wall_time", wall}, {"written_at", timestamp_utc()}};
    write_file(dir / (stem + "_meta.json"), meta.dump(2) + "\n");

    print_ranking(report);
    std::printf("report: %s\n", (dir / (stem + ".json")).string().c_str());
}

int run_experiment_command(const std::string& kind, const TrainFlags& flags, json grid_axes) {
    json cfg = load_config(flags.config_path);
    // A plain training config doubles as {"base": <config>}: the train and
    // experiment key vocabularies are disjoint, so any train key settles it.
    if (!cfg.contains("base")) {
        static constexpr const char* kTrainKeys[] = {
            "model", "optimizer", "steps", "batch_size", "warmup_steps",
            "lr_schedule", "dataset", "dataset_path", "master_seed", "eval_every",
            "target_val_accuracy", "eval_mode_max_batches", "divergence_factor"};
        if (std::any_of(std::begin(kTrainKeys), std::end(kTrainKeys),
                        [&cfg](const char* k) { return cfg.contains(k); })) {
            cfg = json{{"base", std::move(cfg)}};
        }
    }
    cfg["kind"] = kind;
    apply_train_flags(cfg, flags, "base.");
    for (auto& [key, value] : grid_axes.items()) cfg[key] = std::move(value);
    maybe_generate_dataset(cfg, flags, "base.");

    const std::string report = call_string([&cfg, &flags](char** out) {
        return derfkit_experiment_run(cfg.dump().c_str(), flags.threads, out);
    });
    write_experiment_outputs(report, flags.out_dir, kind);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"derfkit: point-wise normalization replacements, property probes, and sweeps"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(derfkit_version()));

    // funcs
    auto* funcs = app.add_subcommand("funcs", "catalog queries");
    funcs->require_subcommand(1);
    bool as_json = false;

    auto* flist = funcs->add_subcommand("list", "list every catalog function");
    flist->add_flag("--json", as_json, "print raw JSON");

    std::string fname;
    double feval_x = 0.0;
    auto* feval = funcs->add_subcommand("eval", "evaluate f(x) and f'(x)");
    feval->add_option("name", fname)->required();
    feval->add_option("x", feval_x)->required();
    feval->add_flag("--json", as_json);

    auto* fprops = funcs->add_subcommand("props", "measured property report");
    fprops->add_option("name", fname)->required();

    // fit-eps
    double radius = 8.0, tol = 1e-6;
    auto* fiteps = app.add_subcommand("fit-eps", "best L1 fit of tanh(eps*x) to erf(x)");
    fiteps->add_option("--radius", radius, "truncation radius (>= 6)");
    fiteps->add_option("--tol", tol, "search tolerance on eps");

    // gen-data
    std::string gd_config, gd_out = "dataset.dfk", gd_kind;
    long long gd_n = -1, gd_seed = -1, gd_seq = -1, gd_cin = -1, gd_classes = -1, gd_bits = -1;
    double gd_margin = -1.0, gd_valfrac = -1.0;
    auto* gendata = app.add_subcommand("gen-data", "write a synthetic dataset file");
    gendata->add_option("--config", gd_config, "JSON dataset spec");
    gendata->add_option("--out", gd_out, "output path");
    gendata->add_option("--kind", gd_kind, "cluster_tokens or parity_seq");
    gendata->add_option("--n", gd_n);
    gendata->add_option("--seq-len", gd_seq);
    gendata->add_option("--c-in", gd_cin);
    gendata->add_option("--classes", gd_classes);
    gendata->add_option("--margin", gd_margin, "class separation in mean-embedding sigmas");
    gendata->add_option("--parity-bits", gd_bits);
    gendata->add_option("--seed", gd_seed);
    gendata->add_option("--val-fraction", gd_valfrac);

    // train
    TrainFlags train_flags;
    auto* train_cmd = app.add_subcommand("train", "single training run");
    add_train_flags(train_cmd, train_flags);

    // search
    TrainFlags search_flags;
    std::vector<std::string> search_fns;
    long long search_repeats = -1;
    auto* search_cmd = app.add_subcommand("search", "train every candidate function");
    add_train_flags(search_cmd, search_flags);
    search_cmd->add_option("--functions", search_fns, "comma-separated names, or 'all'")
        ->delimiter(',');
    search_cmd->add_option("--repeats", search_repeats);

    // sweep
    TrainFlags sweep_flags;
    std::string sweep_kind, sweep_shift_type, sweep_base_fn;
    std::vector<double> sweep_lambdas;
    std::vector<std::string> sweep_smodes, sweep_fns;
    long long sweep_repeats = -1;
    auto* sweep_cmd = app.add_subcommand("sweep", "property construction sweeps");
    add_train_flags(sweep_cmd, sweep_flags);
    sweep_cmd
        ->add_option("--kind", sweep_kind,
                     "shift|bound|mix|flat|monotonic|growth|s|eps (or full experiment names)")
        ->required();
    sweep_cmd->add_option("--shift-type", sweep_shift_type, "horizontal or vertical");
    sweep_cmd->add_option("--lambdas", sweep_lambdas, "comma-separated values")->delimiter(',');
    sweep_cmd->add_option("--base-fn", sweep_base_fn, "function the sweep modifies");
    sweep_cmd->add_option("--s-modes", sweep_smodes)->delimiter(',');
    sweep_cmd->add_option("--functions", sweep_fns)->delimiter(',');
    sweep_cmd->add_option("--repeats", sweep_repeats);

    // fitloss
    TrainFlags fitloss_flags;
    std::vector<std::string> fitloss_slots;
    long long fitloss_repeats = -1;
    auto* fitloss_cmd =
        app.add_subcommand("fitloss", "eval-mode training-loss comparison across slots");
    add_train_flags(fitloss_cmd, fitloss_flags);
    fitloss_cmd->add_option("--slots", fitloss_slots, "slot kinds and/or function names")
        ->delimiter(',');
    fitloss_cmd->add_option("--repeats", fitloss_repeats);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 3;  // bad flags are config errors
    }

    if (flist->parsed()) {
        const std::string listing = call_string(derfkit_funcs_list);
        if (as_json) {
            std::printf("%s\n", listing.c_str());
            return 0;
        }
        std::printf("%-22s %-14s %-6s %s\n", "name", "group", "search", "formula");
        for (const auto& f : json::parse(listing)) {
            std::printf("%-22s %-14s %-6s %s\n", f.at("name").get<std::string>().c_str(),
                        f.at("construction_group").get<std::string>().c_str(),
                        f.at("search_candidate").get<bool>() ? "yes" : "no",
                        f.at("formula").get<std::string>().c_str());
        }
        return 0;
    }

    if (feval->parsed() || fprops->parsed()) {
        derfkit_func_t* handle = nullptr;
        derfkit_status s = derfkit_func_open(fname.c_str(), &handle);
        if (s != DERFKIT_OK) die(s);
        if (feval->parsed()) {
            double v = 0.0, d = 0.0;
            s = derfkit_func_eval_at(handle, feval_x, &v, &d);
            if (s != DERFKIT_OK) {
                derfkit_func_close(handle);
                die(s);
            }
            if (as_json) {
                std::printf("%s\n",
                            json{{"name", fname}, {"x", feval_x}, {"value", v}, {"derivative", d}}
                                .dump()
                                .c_str());
            } else {
                std::printf("f(%.10g) = %.10g\nf'(%.10g) = %.10g\n", feval_x, v, feval_x, d);
            }
        } else {
            const std::string props = call_string(
                [handle](char** out) { return derfkit_func_classify(handle, out); });
            std::printf("%s\n", json::parse(props).dump(2).c_str());
        }
        derfkit_func_close(handle);
        return 0;
    }

    if (fiteps->parsed()) {
        const std::string result = call_string(
            [radius, tol](char** out) { return derfkit_fit_eps(radius, tol, out); });
        std::printf("%s\n", json::parse(result).dump(2).c_str());
        return 0;
    }

    if (gendata->parsed()) {
        json spec = load_config(gd_config);
        if (!gd_kind.empty()) spec["kind"] = gd_kind;
        if (gd_n >= 0) spec["n"] = gd_n;
        if (gd_seq >= 0) spec["seq_len"] = gd_seq;
        if (gd_cin >= 0) spec["c_in"] = gd_cin;
        if (gd_classes >= 0) spec["n_classes"] = gd_classes;
        if (gd_margin >= 0.0) spec["margin"] = gd_margin;
        if (gd_bits >= 0) spec["parity_bits"] = gd_bits;
        if (gd_seed >= 0) spec["seed"] = gd_seed;
        if (gd_valfrac >= 0.0) spec["val_fraction"] = gd_valfrac;
        derfkit_status s = derfkit_dataset_generate(spec.dump().c_str(), gd_out.c_str());
        if (s != DERFKIT_OK) die(s);

        derfkit_dataset_t* handle = nullptr;
        s = derfkit_dataset_open(gd_out.c_str(), &handle);
        if (s != DERFKIT_OK) die(s);
        const std::string info =
            call_string([handle](char** out) { return derfkit_dataset_info(handle, out); });
        derfkit_dataset_close(handle);
        const json j = json::parse(info);
        std::printf("wrote %s: %s, %zu rows (train %zu / val %zu)\n", gd_out.c_str(),
                    j.at("kind").get<std::string>().c_str(), j.at("n").get<std::size_t>(),
                    j.at("train_count").get<std::size_t>(), j.at("val_count").get<std::size_t>());
        return 0;
    }

    if (train_cmd->parsed()) {
        json cfg = load_config(train_flags.config_path);
        apply_train_flags(cfg, train_flags, "");
        maybe_generate_dataset(cfg, train_flags, "");
        fs::create_directories(train_flags.out_dir);
        const fs::path dir(train_flags.out_dir);
        const std::string ckpt = (dir / "checkpoint.dfkc").string();

        const std::string out = call_string([&cfg, &ckpt](char** o) {
            return derfkit_train(cfg.dump().c_str(), ckpt.c_str(), o);
        });
        json j = json::parse(out);
        const double wall = j.value("wall_time", 0.0);
        j.erase("wall_time");
        write_file(dir / "train_report.json", j.dump(2) + "\n");
        write_file(dir / "train_meta.json",
                   json{{"wall_time", wall}, {"written_at", timestamp_utc()}}.dump(2) + "\n");

        const json& r = j.at("result");
        std::printf("steps %zu  final_train_loss %.6f  eval_mode_train_loss %.6f  "
                    "val_accuracy %.4f  diverged %s\n",
                    r.at("steps_completed").get<std::size_t>(),
                    r.at("final_train_loss").is_null() ? std::nan("")
                                                       : r.at("final_train_loss").get<double>(),
                    r.at("eval_mode_train_loss").is_null()
                        ? std::nan("")
                        : r.at("eval_mode_train_loss").get<double>(),
                    r.at("val_accuracy").get<double>(),
                    r.at("diverged").get<bool>() ? "yes" : "no");
        std::printf("checkpoint: %s\nreport: %s\n", ckpt.c_str(),
                    (dir / "train_report.json").string().c_str());
        return 0;
    }

    if (search_cmd->parsed()) {
        json axes = json::object();
        if (!search_fns.empty() && !(search_fns.size() == 1 && search_fns[0] == "all")) {
            axes["functions"] = search_fns;
        }
        if (search_repeats >= 0) axes["repeats"] = search_repeats;
        return run_experiment_command("search", search_flags, axes);
    }

    if (sweep_cmd->parsed()) {
        static const std::pair<const char*, const char*> kind_map[] = {
            {"shift", "shift_sweep"}, {"bound", "bound_sweep"},   {"mix", "mix_sweep"},
            {"flat", "flat_sweep"},   {"monotonic", "monotonic_compare"},
            {"growth", "growth_probe"}, {"s", "s_ablation"},      {"eps", "eps_tanh_compare"},
        };
        std::string kind = sweep_kind;
        for (const auto& [alias, full] : kind_map) {
            if (kind == alias) kind = full;
        }
        json axes = json::object();
        if (!sweep_shift_type.empty()) axes["shift_type"] = sweep_shift_type;
        if (!sweep_lambdas.empty()) axes["lambdas"] = sweep_lambdas;
        if (!sweep_base_fn.empty()) axes["base_fn"] = sweep_base_fn;
        if (!sweep_smodes.empty()) axes["s_modes"] = sweep_smodes;
        if (!sweep_fns.empty()) axes["functions"] = sweep_fns;
        if (sweep_repeats >= 0) axes["repeats"] = sweep_repeats;
        return run_experiment_command(kind, sweep_flags, axes);
    }

    if (fitloss_cmd->parsed()) {
        json axes = json::object();
        if (!fitloss_slots.empty()) axes["functions"] = fitloss_slots;
        if (fitloss_repeats >= 0) axes["repeats"] = fitloss_repeats;
        return run_experiment_command("fitloss", fitloss_flags, axes);
    }

    return 0;
}
