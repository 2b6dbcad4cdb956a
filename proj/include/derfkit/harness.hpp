#pragma once

#include "derfkit/dataset.hpp"
#include "derfkit/model.hpp"
#include "derfkit/optimizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace derfkit {

struct TrainSpec {
    ToyTransformerConfig model;
    AdamWConfig optimizer;
    std::size_t steps = 1000;
    std::size_t batch_size = 64;
    std::size_t warmup_steps = 50;
    LrSchedule lr_schedule = LrSchedule::cosine;
    DatasetSpec dataset;
    std::string dataset_path;  // when set, load this file instead of generating
    std::uint64_t master_seed = 0;

    // Periodic validation: every eval_every steps (0 = never); training stops
    // early once val accuracy reaches target_val_accuracy (0 = run all steps).
    std::size_t eval_every = 0;
    double target_val_accuracy = 0.0;
    // Eval-mode loss over the first K train batches (0 = the full split).
    std::size_t eval_mode_max_batches = 0;
    double divergence_factor = 50.0;

    void validate() const;
};

nlohmann::json train_spec_to_json(const TrainSpec& spec);
TrainSpec train_spec_from_json(const nlohmann::json& j);

struct TrialResult {
    std::string trial_id;
    std::string function_name;  // slot label for the trial
    std::string sweep_kind;     // which lambda axis varied ("" when none)
    double sweep_value = 0.0;
    double final_train_loss = 0.0;
    double eval_mode_train_loss = 0.0;
    double val_accuracy = 0.0;
    bool diverged = false;
    std::size_t steps_completed = 0;
    double wall_time = 0.0;  // seconds; kept out of report JSON for reproducibility
};

nlohmann::json trial_result_to_json(const TrialResult& r, bool with_sweep);

struct TrainOutput {
    TrialResult result;
    std::vector<double> loss_curve;  // train-mode loss per completed step
    ToyTransformer model;
};

// Runs AdamW over shuffled full batches of the train split. Divergence —
// non-finite loss or loss above divergence_factor x the 10th-step value —
// stops the loop and is recorded on the result, not thrown.
TrainOutput train(const TrainSpec& spec, const Dataset& dataset);
TrainOutput train(const TrainSpec& spec);  // resolves the dataset first

// Deterministic loss over the train split: drop-path off, canonical batch
// order, per-example mean. max_batches = 0 means the whole split.
double eval_mode_train_loss(const ToyTransformer& model, const Dataset& dataset,
                            std::size_t batch_size, std::size_t max_batches = 0);

// Same pass but train-mode stochasticity on (one draw per batch from `seed`),
// for comparing against the eval-mode number on identical weights.
double train_mode_loss(const ToyTransformer& model, const Dataset& dataset,
                       std::size_t batch_size, std::uint64_t seed,
                       std::size_t max_batches = 0);

// Argmax accuracy over the validation split, evaluated in bounded chunks.
double validation_accuracy(const ToyTransformer& model, const Dataset& dataset);

enum class ExperimentKind {
    search,
    shift_sweep,
    bound_sweep,
    mix_sweep,
    flat_sweep,
    monotonic_compare,
    growth_probe,
    s_ablation,
    eps_tanh_compare,
    fitloss,
};
std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);

struct ExperimentSpec {
    ExperimentKind kind = ExperimentKind::search;
    TrainSpec base;  // base.master_seed seeds every trial via hash(seed, trial_id)
    // Grid axes; which ones apply depends on kind. Empty vectors fall back to
    // the kind's default grid.
    std::vector<std::string> functions;  // search/monotonic_compare/growth_probe/fitloss slots
    std::vector<double> lambdas;         // sweep values, or epsilons for eps_tanh_compare
    std::string shift_type = "horizontal";  // shift_sweep only
    std::string base_fn;                    // sweep base function ("" = kind default)
    std::vector<std::string> s_modes;       // s_ablation
    std::size_t repeats = 3;

    void validate() const;
};

nlohmann::json experiment_spec_to_json(const ExperimentSpec& spec);
ExperimentSpec experiment_spec_from_json(const nlohmann::json& j);

// One grid point: a slot to install plus report labels.
struct TrialPoint {
    std::string point;  // e.g. "clip(linear,0.5)"
    SlotSpec slot;
    std::string sweep_kind;
    double sweep_value = 0.0;
};

// The expanded grid for a spec, before repeats; exposed for tests and the CLI.
std::vector<TrialPoint> expand_grid(const ExperimentSpec& spec);

struct ExperimentResult {
    std::vector<TrialResult> trials;  // sorted by trial_id
    nlohmann::json report;            // deterministic; wall times excluded
    double total_wall_time = 0.0;
};

// Runs repeats x grid trials, each with seeds derived from
// hash(master_seed, trial_id), sharing one immutable dataset. max_threads = 0
// means use DERFKIT_THREADS or the hardware count. Trial divergence is
// recorded per trial and never aborts the run.
ExperimentResult run_experiment(const ExperimentSpec& spec, std::size_t max_threads = 0);

std::string report_to_csv(const nlohmann::json& report);

} // namespace derfkit
