#include "doctest.h"

#include "derfkit/dataset.hpp"
#include "derfkit/errors.hpp"
#include "derfkit/harness.hpp"
#include "derfkit/optimizer.hpp"
#include "derfkit/version.hpp"

#include "support.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

using namespace derfkit;

namespace {

DatasetSpec tiny_dataset_spec() {
    DatasetSpec d;
    d.kind = DatasetKind::cluster_tokens;
    d.n = 128;
    d.seq_len = 4;
    d.c_in = 4;
    d.n_classes = 2;
    d.margin = 3.0;
    d.seed = 21;
    d.val_fraction = 0.25;
    return d;
}

TrainSpec tiny_train_spec() {
    TrainSpec spec;
    spec.model.depth = 1;
    spec.model.d_model = 8;
    spec.model.n_heads = 2;
    spec.model.d_ff = 16;
    spec.model.seq_len = 4;
    spec.model.n_classes = 2;
    spec.model.c_in = 4;
    spec.model.seed = 5;
    spec.optimizer.lr = 3e-3;
    spec.steps = 8;
    spec.batch_size = 32;
    spec.warmup_steps = 2;
    spec.dataset = tiny_dataset_spec();
    spec.master_seed = 77;
    return spec;
}

std::string temp_path(const char* stem) {
    return std::string("/tmp/derfkit_test_") + stem + "_" + std::to_string(getpid());
}

} // namespace

TEST_CASE("synthetic datasets are deterministic and exactly balanced") {
    DatasetSpec spec = tiny_dataset_spec();
    spec.n = 512;
    const Dataset a = make_synthetic_dataset(spec);
    const Dataset b = make_synthetic_dataset(spec);
    REQUIRE(a.size() == 512);
    CHECK(a.labels == b.labels);
    for (std::size_t i = 0; i < a.inputs.numel(); ++i) CHECK(a.inputs[i] == b.inputs[i]);

    std::size_t ones = 0;
    for (auto l : a.labels) ones += static_cast<std::size_t>(l);
    CHECK(ones == 256);

    spec.n_classes = 4;
    spec.c_in = 8;
    spec.n = 300;
    const Dataset c = make_synthetic_dataset(spec);
    std::vector<std::size_t> counts(4, 0);
    for (auto l : c.labels) ++counts[static_cast<std::size_t>(l)];
    for (std::size_t k = 0; k < 4; ++k) CHECK(counts[k] == 75);

    spec.seed = 22;
    const Dataset d = make_synthetic_dataset(spec);
    CHECK(d.labels != c.labels);  // seed moves the shuffle
}

TEST_CASE("cluster margin separates classes linearly") {
    DatasetSpec spec = tiny_dataset_spec();
    spec.n = 1024;
    spec.seq_len = 16;
    spec.c_in = 8;
    const Dataset ds = make_synthetic_dataset(spec);
    // A plain logistic probe on mean embeddings must already solve a
    // 3-sigma-margin task; the transformer only has to match this.
    CHECK(testsupport::logistic_probe_accuracy(ds) >= 0.99);

    DatasetSpec narrow = spec;
    narrow.margin = 0.1;
    narrow.seed = 3;
    const double acc_narrow =
        testsupport::logistic_probe_accuracy(make_synthetic_dataset(narrow));
    CHECK(acc_narrow < 0.75);  // near-overlapping clusters are hard
}

TEST_CASE("train/val split accounting and slicing") {
    DatasetSpec spec = tiny_dataset_spec();
    spec.n = 101;
    spec.val_fraction = 0.25;
    const Dataset ds = make_synthetic_dataset(spec);
    CHECK(ds.train_count() == 101 - 25);
    CHECK(ds.val_count() == 25);

    const ToyBatch head = ds.slice(0, 3);
    CHECK(head.inputs.shape() == Shape{3, spec.seq_len, spec.c_in});
    CHECK(head.labels.size() == 3);
    for (std::size_t i = 0; i < head.inputs.numel(); ++i) {
        CHECK(head.inputs[i] == ds.inputs[i]);
    }

    const ToyBatch picked = ds.gather({5, 2});
    for (std::size_t j = 0; j < spec.seq_len * spec.c_in; ++j) {
        CHECK(picked.inputs[j] == ds.inputs[5 * spec.seq_len * spec.c_in + j]);
    }
    CHECK(picked.labels[1] == ds.labels[2]);

    CHECK(ds.val_batch().labels.size() == 25);
    CHECK_THROWS_AS(ds.slice(100, 5), Error);
}

TEST_CASE("parity sequences label the marked-position sign parity") {
    DatasetSpec spec;
    spec.kind = DatasetKind::parity_seq;
    spec.n = 200;
    spec.seq_len = 6;
    spec.c_in = 3;
    spec.n_classes = 2;
    spec.parity_bits = 3;
    spec.seed = 9;
    const Dataset ds = make_synthetic_dataset(spec);

    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::size_t neg = 0;
        for (std::size_t t = 0; t < spec.parity_bits; ++t) {
            if (ds.inputs[(i * spec.seq_len + t) * spec.c_in] < 0.0) ++neg;
        }
        CHECK(static_cast<std::int64_t>(neg % 2) == ds.labels[i]);
    }
}

TEST_CASE("dataset spec validation and JSON") {
    DatasetSpec spec = tiny_dataset_spec();
    CHECK_NOTHROW(spec.validate());

    DatasetSpec bad = spec;
    bad.n_classes = 10;  // more classes than input channels
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.margin = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.kind = DatasetKind::parity_seq;
    bad.parity_bits = 40;  // more marked positions than tokens
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.val_fraction = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    const nlohmann::json j = dataset_spec_to_json(spec);
    const DatasetSpec back = dataset_spec_from_json(j);
    CHECK(dataset_spec_to_json(back) == j);
    nlohmann::json extra = j;
    extra["shape"] = 4;
    try {
        dataset_spec_from_json(extra);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("shape") != std::string::npos);
    }
}

TEST_CASE("dataset files round trip byte-for-byte") {
    const Dataset ds = make_synthetic_dataset(tiny_dataset_spec());
    const std::string path = temp_path("ds");
    save_dataset(ds, path);
    save_dataset(ds, path + ".again");

    std::ifstream f1(path, std::ios::binary), f2(path + ".again", std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    const Dataset back = load_dataset(path);
    CHECK(back.labels == ds.labels);
    CHECK(dataset_spec_to_json(back.spec) == dataset_spec_to_json(ds.spec));
    for (std::size_t i = 0; i < ds.inputs.numel(); ++i) CHECK(back.inputs[i] == ds.inputs[i]);

    CHECK_THROWS_AS(load_dataset("/tmp/derfkit_no_such_dataset.dfk"), IoError);
    {
        std::ofstream bad(path + ".bad", std::ios::binary);
        bad << "JUNKJUNKJUNKJUNK";
    }
    CHECK_THROWS_AS(load_dataset(path + ".bad"), IoError);

    std::remove(path.c_str());
    std::remove((path + ".again").c_str());
    std::remove((path + ".bad").c_str());
}

TEST_CASE("AdamW math on a single scalar parameter") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    std::vector<Parameter> params{{"p", Tensor::scalar(1.0)}};
    AdamW opt(cfg, params);

    const Tensor g = Tensor::scalar(0.5);
    opt.step(params, {&g}, cfg.lr);

    // After one step bias correction cancels: m_hat = g, v_hat = g^2.
    const double expected =
        1.0 - 0.1 * (0.5 / (std::sqrt(0.25) + cfg.eps) + 0.01 * 1.0);
    CHECK(params[0].value.item() == doctest::Approx(expected).epsilon(1e-12));

    AdamWConfig bad;
    bad.lr = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = AdamWConfig{};
    bad.beta1 = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = AdamWConfig{};
    bad.lr = 0.0;  // explicitly allowed: freezes the weights
    CHECK_NOTHROW(bad.validate());
}

TEST_CASE("learning-rate schedule: warmup ramp, cosine tail") {
    CHECK(lr_at(1.0, LrSchedule::cosine, 0, 100, 10) == doctest::Approx(0.1));
    CHECK(lr_at(1.0, LrSchedule::cosine, 9, 100, 10) == doctest::Approx(1.0));
    CHECK(lr_at(1.0, LrSchedule::constant, 50, 100, 10) == 1.0);
    CHECK(lr_at(1.0, LrSchedule::cosine, 99, 100, 10) == doctest::Approx(0.0).epsilon(1e-12));
    const double mid = lr_at(1.0, LrSchedule::cosine, 54, 100, 10);  // halfway point
    CHECK(mid == doctest::Approx(0.5).epsilon(0.05));
    CHECK(lr_schedule_from_string("cosine") == LrSchedule::cosine);
    CHECK(to_string(LrSchedule::constant) == "constant");
    CHECK_THROWS_AS(lr_schedule_from_string("linear"), ConfigError);
}

TEST_CASE("zero learning rate leaves the loss unchanged") {
    TrainSpec spec = tiny_train_spec();
    spec.optimizer.lr = 0.0;
    spec.steps = 4;
    spec.batch_size = 96;  // the whole train split: one batch per epoch
    const TrainOutput out = train(spec);
    REQUIRE(out.loss_curve.size() == 4);
    CHECK(std::abs(out.loss_curve.back() - out.loss_curve.front()) <= 1e-12);
    CHECK(out.result.final_train_loss == out.loss_curve.back());
    CHECK(!out.result.diverged);
}

TEST_CASE("training is bit-deterministic in the master seed") {
    const TrainSpec spec = tiny_train_spec();
    const TrainOutput a = train(spec);
    const TrainOutput b = train(spec);
    REQUIRE(a.loss_curve.size() == b.loss_curve.size());
    for (std::size_t i = 0; i < a.loss_curve.size(); ++i) {
        CHECK(a.loss_curve[i] == b.loss_curve[i]);
    }
    CHECK(a.result.val_accuracy == b.result.val_accuracy);
    CHECK(a.result.eval_mode_train_loss == b.result.eval_mode_train_loss);
    CHECK(a.result.steps_completed == 8);

    TrainSpec other = spec;
    other.master_seed = 78;
    const TrainOutput c = train(other);
    CHECK(c.loss_curve.front() != a.loss_curve.front());
}

TEST_CASE("divergence is recorded, not thrown") {
    TrainSpec spec = tiny_train_spec();
    spec.optimizer.lr = 1e8;  // blows up within a few steps
    spec.steps = 40;
    const TrainOutput out = train(spec);
    CHECK(out.result.diverged);
    CHECK(out.result.steps_completed < 40);
    CHECK(out.result.steps_completed == out.loss_curve.size());
}

TEST_CASE("early stopping on the validation target") {
    TrainSpec spec = tiny_train_spec();
    spec.model.d_model = 16;
    spec.model.d_ff = 32;
    spec.dataset.n = 256;
    spec.dataset.seq_len = 4;
    spec.batch_size = 64;
    spec.optimizer.lr = 5e-3;
    spec.steps = 400;
    spec.warmup_steps = 10;
    spec.eval_every = 10;
    spec.target_val_accuracy = 0.9;
    const TrainOutput out = train(spec);
    CHECK(out.result.val_accuracy >= 0.9);
    CHECK(out.result.steps_completed < 400);
    CHECK(out.result.steps_completed % 10 == 0);
    CHECK(out.result.steps_completed == out.loss_curve.size());
}

TEST_CASE("eval-mode train loss: deterministic, ln(K) at init, dataset checks") {
    const DatasetSpec dspec = tiny_dataset_spec();
    const Dataset ds = make_synthetic_dataset(dspec);
    ToyTransformerConfig mc = tiny_train_spec().model;
    const ToyTransformer model(mc);

    const double l1 = eval_mode_train_loss(model, ds, 32);
    const double l2 = eval_mode_train_loss(model, ds, 32);
    CHECK(l1 == l2);
    // Batch size must not matter beyond the per-example weighting.
    CHECK(std::abs(eval_mode_train_loss(model, ds, 7) - l1) <= 1e-12);
    CHECK(std::abs(l1 - std::log(2.0)) <= 0.1);

    const double partial = eval_mode_train_loss(model, ds, 32, 1);
    CHECK(std::isfinite(partial));

    DatasetSpec mismatched = dspec;
    mismatched.c_in = 8;
    CHECK_THROWS_AS(eval_mode_train_loss(model, make_synthetic_dataset(mismatched), 32),
                    ContractError);
}

TEST_CASE("stochastic depth lowers the eval-mode loss below train mode") {
    TrainSpec spec = tiny_train_spec();
    spec.model.drop_path_rate = 0.3;
    spec.steps = 30;
    const TrainOutput out = train(spec);
    const Dataset ds = make_synthetic_dataset(spec.dataset);
    const double eval_loss = eval_mode_train_loss(out.model, ds, spec.batch_size);
    const double train_loss = train_mode_loss(out.model, ds, spec.batch_size, 123);
    CHECK(eval_loss <= train_loss);
    CHECK(out.result.eval_mode_train_loss == eval_loss);
}

TEST_CASE("experiment grids expand to their documented defaults") {
    ExperimentSpec spec;
    spec.base = tiny_train_spec();

    spec.kind = ExperimentKind::search;
    CHECK(expand_grid(spec).size() == 16);

    spec.kind = ExperimentKind::shift_sweep;
    auto shift_pts = expand_grid(spec);
    CHECK(shift_pts.size() == 7);
    bool has_identity = false;
    for (const auto& p : shift_pts) {
        if (p.point == "erf" && p.sweep_value == 0.0) has_identity = true;
        CHECK(p.sweep_kind == "lambda_shift_h");
    }
    CHECK(has_identity);

    spec.kind = ExperimentKind::bound_sweep;
    CHECK(expand_grid(spec).size() == 6);
    spec.kind = ExperimentKind::mix_sweep;
    CHECK(expand_grid(spec).size() == 3);
    spec.kind = ExperimentKind::flat_sweep;
    CHECK(expand_grid(spec).size() == 5);
    spec.kind = ExperimentKind::monotonic_compare;
    CHECK(expand_grid(spec).size() == 2);
    spec.kind = ExperimentKind::growth_probe;
    CHECK(expand_grid(spec).size() == 5);
    spec.kind = ExperimentKind::s_ablation;
    CHECK(expand_grid(spec).size() == 3);
    spec.kind = ExperimentKind::eps_tanh_compare;
    CHECK(expand_grid(spec).size() == 3);  // two coefficients plus the reference slot
    spec.kind = ExperimentKind::fitloss;
    CHECK(expand_grid(spec).size() == 3);

    spec.kind = ExperimentKind::search;
    spec.functions = {"erf", "erf"};
    CHECK_THROWS_AS(expand_grid(spec), ConfigError);
    spec.functions = {"nosuch"};
    CHECK_THROWS_AS(expand_grid(spec), NotFoundError);
}

TEST_CASE("experiments: deterministic reports, thread-count invariance, ranking") {
    ExperimentSpec spec;
    spec.kind = ExperimentKind::search;
    spec.base = tiny_train_spec();
    spec.functions = {"erf", "tanh"};
    spec.repeats = 2;

    const ExperimentResult seq = run_experiment(spec, 1);
    const ExperimentResult par = run_experiment(spec, 4);
    REQUIRE(seq.trials.size() == 4);
    CHECK(seq.report.dump() == par.report.dump());

    for (std::size_t i = 1; i < seq.trials.size(); ++i) {
        CHECK(seq.trials[i - 1].trial_id < seq.trials[i].trial_id);
    }

    CHECK(seq.report.at("experiment_kind") == "search");
    CHECK(seq.report.at("master_seed") == 77);
    CHECK(seq.report.at("repeats") == 2);
    CHECK(seq.report.at("version") == std::string(kVersion));
    CHECK(seq.report.at("catalog_hash") == catalog_hash());
    CHECK(seq.report.at("grid").size() == 2);
    CHECK(seq.report.at("trials").size() == 4);
    CHECK(seq.report.dump().find("wall_time") == std::string::npos);

    const auto& ranking = seq.report.at("ranking");
    REQUIRE(ranking.size() == 2);
    CHECK(ranking[0].at("rank") == 1);
    CHECK(ranking[0].at("mean_val_accuracy").get<double>() >=
          ranking[1].at("mean_val_accuracy").get<double>());
    CHECK(ranking[0].at("repeats") == 2);
}

TEST_CASE("a zero shift trial reproduces the base-function trial bitwise") {
    ExperimentSpec base;
    base.kind = ExperimentKind::search;
    base.base = tiny_train_spec();
    base.functions = {"erf"};
    base.repeats = 1;

    ExperimentSpec sweep;
    sweep.kind = ExperimentKind::shift_sweep;
    sweep.base = tiny_train_spec();
    sweep.base_fn = "erf";
    sweep.lambdas = {0.0, 0.5};
    sweep.repeats = 1;

    const ExperimentResult a = run_experiment(base, 1);
    const ExperimentResult b = run_experiment(sweep, 1);
    REQUIRE(a.trials.size() == 1);
    REQUIRE(b.trials.size() == 2);

    const TrialResult* zero = nullptr;
    for (const auto& t : b.trials) {
        if (t.sweep_value == 0.0) zero = &t;
    }
    REQUIRE(zero != nullptr);
    CHECK(zero->trial_id == a.trials[0].trial_id);
    CHECK(zero->final_train_loss == a.trials[0].final_train_loss);
    CHECK(zero->eval_mode_train_loss == a.trials[0].eval_mode_train_loss);
    CHECK(zero->val_accuracy == a.trials[0].val_accuracy);
}

TEST_CASE("fitloss experiments rank by eval-mode loss") {
    ExperimentSpec spec;
    spec.kind = ExperimentKind::fitloss;
    spec.base = tiny_train_spec();
    spec.functions = {"layer_norm", "derf"};
    spec.repeats = 1;
    const ExperimentResult res = run_experiment(spec, 2);
    const auto& ranking = res.report.at("ranking");
    REQUIRE(ranking.size() == 2);
    CHECK(ranking[0].at("mean_eval_mode_train_loss").get<double>() <=
          ranking[1].at("mean_eval_mode_train_loss").get<double>());
}

TEST_CASE("CSV export carries one row per trial") {
    ExperimentSpec spec;
    spec.kind = ExperimentKind::mix_sweep;
    spec.base = tiny_train_spec();
    spec.lambdas = {0.1, 0.5};
    spec.repeats = 1;
    const ExperimentResult res = run_experiment(spec, 2);
    const std::string csv = report_to_csv(res.report);

    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        const std::size_t nl = csv.find('\n', pos);
        if (nl == std::string::npos) break;
        lines.push_back(csv.substr(pos, nl - pos));
        pos = nl + 1;
    }
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] ==
          "trial_id,function_name,sweep_kind,sweep_value,final_train_loss,"
          "eval_mode_train_loss,val_accuracy,diverged,steps_completed");
    CHECK(lines[1].find("mix(erf,0.1)/r0") == 0);
    CHECK(lines[1].find("lambda_b") != std::string::npos);
}

TEST_CASE("train and experiment specs round trip through JSON") {
    TrainSpec spec = tiny_train_spec();
    spec.eval_every = 10;
    spec.target_val_accuracy = 0.9;
    const nlohmann::json j = train_spec_to_json(spec);
    const TrainSpec back = train_spec_from_json(j);
    CHECK(train_spec_to_json(back) == j);

    nlohmann::json extra = j;
    extra["learning_rate"] = 0.1;
    try {
        train_spec_from_json(extra);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
    }

    ExperimentSpec es;
    es.kind = ExperimentKind::flat_sweep;
    es.base = spec;
    es.lambdas = {0.5, 1.0};
    es.repeats = 2;
    const nlohmann::json ej = experiment_spec_to_json(es);
    const ExperimentSpec eback = experiment_spec_from_json(ej);
    CHECK(experiment_spec_to_json(eback) == ej);
    CHECK(eback.kind == ExperimentKind::flat_sweep);
    CHECK(eback.lambdas == std::vector<double>{0.5, 1.0});

    TrainSpec bad = spec;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.steps = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = spec;
    bad.divergence_factor = 0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
