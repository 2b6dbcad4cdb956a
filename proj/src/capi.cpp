#include "derfkit.h"

#include "derfkit/dataset.hpp"
#include "derfkit/errors.hpp"
#include "derfkit/funcs.hpp"
#include "derfkit/harness.hpp"
#include "derfkit/props.hpp"
#include "derfkit/version.hpp"

#include <json.hpp>

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

using nlohmann::json;

struct derfkit_func {
    derfkit::PointwiseFn fn;
};

struct derfkit_dataset {
    derfkit::Dataset ds;
};

namespace {

thread_local std::string g_last_error;

derfkit_status map_category(derfkit::Error::Category cat) {
    using Cat = derfkit::Error::Category;
    switch (cat) {
        case Cat::invalid_argument: return DERFKIT_ERR_INVALID_ARGUMENT;
        case Cat::shape: return DERFKIT_ERR_SHAPE;
        case Cat::parameter: return DERFKIT_ERR_PARAMETER;
        case Cat::contract: return DERFKIT_ERR_CONTRACT;
        case Cat::not_found: return DERFKIT_ERR_NOT_FOUND;
        case Cat::config: return DERFKIT_ERR_CONFIG;
        case Cat::io: return DERFKIT_ERR_IO;
        case Cat::evaluation: return DERFKIT_ERR_EVALUATION;
        case Cat::optimization: return DERFKIT_ERR_OPTIMIZATION;
    }
    return DERFKIT_ERR_INTERNAL;
}

template <typename Fn>
derfkit_status guarded(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return DERFKIT_OK;
    } catch (const derfkit::Error& e) {
        g_last_error = e.what();
        return map_category(e.category());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return DERFKIT_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return DERFKIT_ERR_INTERNAL;
    }
}

derfkit_status fail_invalid(const char* msg) {
    g_last_error = msg;
    return DERFKIT_ERR_INVALID_ARGUMENT;
}

char* copy_out(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.data(), s.size() + 1);
    return out;
}

json func_info_json(const derfkit::PointwiseFn& f) {
    return json{
        {"name", f.name},
        {"formula", f.formula},
        {"construction_group", derfkit::to_string(f.group)},
        {"search_candidate", f.search_candidate},
        {"declared",
         {{"zero_centered", f.props.zero_centered},
          {"bounded", f.props.bounded},
          {"center_sensitive", f.props.center_sensitive},
          {"monotonic", derfkit::to_string(f.props.monotonic)}}},
    };
}

json report_json(const derfkit::PropertyReport& r) {
    return json{
        {"zero_centered", r.zero_centered},
        {"asymmetry", r.asymmetry},
        {"f0", r.f0},
        {"bounded", r.bounded},
        {"sup_abs", r.sup_abs},
        {"center_sensitive", r.center_sensitive},
        {"cs_halfwidth", r.cs_halfwidth},
        {"monotonic", derfkit::to_string(r.monotonic)},
        {"increasing_steps", r.increasing_steps},
        {"decreasing_steps", r.decreasing_steps},
        {"growth_class", derfkit::to_string(r.growth_class)},
        {"growth_slope", r.growth_slope},
        {"sup_at_probe_max", r.sup_at_probe_max},
    };
}

json parse_json(const char* text, const char* what) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw derfkit::ConfigError(std::string(what) + ": invalid JSON: " + e.what());
    }
}

} // namespace

extern "C" {

const char* derfkit_version(void) { return derfkit::kVersion; }

uint64_t derfkit_catalog_hash(void) { return derfkit::catalog_hash(); }

const char* derfkit_last_error(void) { return g_last_error.c_str(); }

void derfkit_string_free(char* s) { std::free(s); }

derfkit_status derfkit_funcs_list(char** out_json) {
    if (!out_json) return fail_invalid("derfkit_funcs_list: out_json is NULL");
    return guarded([&] {
        json arr = json::array();
        for (const auto& f : derfkit::catalog()) arr.push_back(func_info_json(f));
        *out_json = copy_out(arr.dump());
    });
}

derfkit_status derfkit_func_open(const char* name, derfkit_func_t** out) {
    if (!name || !out) return fail_invalid("derfkit_func_open: NULL argument");
    return guarded([&] { *out = new derfkit_func{derfkit::find_fn(name)}; });
}

void derfkit_func_close(derfkit_func_t* f) { delete f; }

derfkit_status derfkit_func_eval_at(const derfkit_func_t* f, double x, double* out_value,
                                    double* out_derivative) {
    if (!f) return fail_invalid("derfkit_func_eval_at: func handle is NULL");
    return guarded([&] {
        if (out_value) *out_value = f->fn.value(x);
        if (out_derivative) *out_derivative = f->fn.derivative(x);
    });
}

derfkit_status derfkit_func_info(const derfkit_func_t* f, char** out_json) {
    if (!f || !out_json) return fail_invalid("derfkit_func_info: NULL argument");
    return guarded([&] { *out_json = copy_out(func_info_json(f->fn).dump()); });
}

derfkit_status derfkit_func_classify(const derfkit_func_t* f, char** out_json) {
    if (!f || !out_json) return fail_invalid("derfkit_func_classify: NULL argument");
    return guarded([&] {
        *out_json = copy_out(report_json(derfkit::classify(f->fn)).dump());
    });
}

derfkit_status derfkit_erf(double x, double* out) {
    if (!out) return fail_invalid("derfkit_erf: out is NULL");
    return guarded([&] { *out = derfkit::erf_eval(x); });
}

derfkit_status derfkit_fit_eps(double radius, double tol, char** out_json) {
    if (!out_json) return fail_invalid("derfkit_fit_eps: out_json is NULL");
    return guarded([&] {
        const derfkit::EpsFitResult r =
            derfkit::fit_eps(radius > 0.0 ? radius : 8.0, tol > 0.0 ? tol : 1e-6);
        *out_json = copy_out(json{{"eps_star", r.eps_star},
                                  {"objective_value", r.objective_value},
                                  {"truncation_radius", r.truncation_radius},
                                  {"integration_tolerance", r.integration_tolerance}}
                                 .dump());
    });
}

derfkit_status derfkit_dataset_generate(const char* spec_json, const char* path) {
    if (!spec_json || !path) return fail_invalid("derfkit_dataset_generate: NULL argument");
    return guarded([&] {
        const derfkit::DatasetSpec spec =
            derfkit::dataset_spec_from_json(parse_json(spec_json, "dataset spec"));
        derfkit::save_dataset(derfkit::make_synthetic_dataset(spec), path);
    });
}

derfkit_status derfkit_dataset_open(const char* path, derfkit_dataset_t** out) {
    if (!path || !out) return fail_invalid("derfkit_dataset_open: NULL argument");
    return guarded([&] { *out = new derfkit_dataset{derfkit::load_dataset(path)}; });
}

void derfkit_dataset_close(derfkit_dataset_t* d) { delete d; }

derfkit_status derfkit_dataset_info(const derfkit_dataset_t* d, char** out_json) {
    if (!d || !out_json) return fail_invalid("derfkit_dataset_info: NULL argument");
    return guarded([&] {
        json j = derfkit::dataset_spec_to_json(d->ds.spec);
        j["train_count"] = d->ds.train_count();
        j["val_count"] = d->ds.val_count();
        *out_json = copy_out(j.dump());
    });
}

derfkit_status derfkit_train(const char* train_spec_json, const char* checkpoint_path,
                             char** out_json) {
    if (!train_spec_json || !out_json) return fail_invalid("derfkit_train: NULL argument");
    return guarded([&] {
        const derfkit::TrainSpec spec =
            derfkit::train_spec_from_json(parse_json(train_spec_json, "train spec"));
        derfkit::TrainOutput out = derfkit::train(spec);
        if (checkpoint_path && *checkpoint_path) {
            derfkit::save_checkpoint(out.model, checkpoint_path);
        }
        json j{
            {"result", derfkit::trial_result_to_json(out.result, false)},
            {"loss_curve", out.loss_curve},
            {"wall_time", out.result.wall_time},
        };
        *out_json = copy_out(j.dump());
    });
}

derfkit_status derfkit_experiment_run(const char* experiment_spec_json, int max_threads,
                                      char** out_report_json) {
    if (!experiment_spec_json || !out_report_json) {
        return fail_invalid("derfkit_experiment_run: NULL argument");
    }
    return guarded([&] {
        const derfkit::ExperimentSpec spec = derfkit::experiment_spec_from_json(
            parse_json(experiment_spec_json, "experiment spec"));
        derfkit::ExperimentResult res = derfkit::run_experiment(
            spec, max_threads > 0 ? static_cast<std::size_t>(max_threads) : 0);
        json j = res.report;
        j["wall_time"] = res.total_wall_time;
        *out_report_json = copy_out(j.dump());
    });
}

derfkit_status derfkit_report_csv(const char* report_json, char** out_csv) {
    if (!report_json || !out_csv) return fail_invalid("derfkit_report_csv: NULL argument");
    return guarded([&] {
        const json report = parse_json(report_json, "report");
        if (!report.contains("trials")) {
            throw derfkit::ConfigError("report: missing 'trials' array");
        }
        *out_csv = copy_out(derfkit::report_to_csv(report));
    });
}

derfkit_status derfkit_eval_mode_train_loss(const char* checkpoint_path,
                                            const char* dataset_path, uint64_t batch_size,
                                            uint64_t max_batches, double* out_loss) {
    if (!checkpoint_path || !dataset_path || !out_loss) {
        return fail_invalid("derfkit_eval_mode_train_loss: NULL argument");
    }
    return guarded([&] {
        const derfkit::ToyTransformer model = derfkit::load_checkpoint(checkpoint_path);
        const derfkit::Dataset ds = derfkit::load_dataset(dataset_path);
        *out_loss = derfkit::eval_mode_train_loss(model, ds, batch_size, max_batches);
    });
}

} // extern "C"
