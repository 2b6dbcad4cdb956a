/* C interface to the derfkit shared library.
 *
 * Conventions:
 *   - Every fallible call returns derfkit_status; DERFKIT_OK is 0.
 *   - On failure, derfkit_last_error() returns a thread-local message that
 *     stays valid until the next derfkit call on the same thread.
 *   - Strings returned through char** out-parameters are heap-allocated;
 *     release them with derfkit_string_free().
 *   - JSON goes in and out as UTF-8 strings; the schemas mirror the CLI
 *     config files (see README).
 */
#ifndef DERFKIT_H
#define DERFKIT_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum derfkit_status {
    DERFKIT_OK = 0,
    DERFKIT_ERR_INVALID_ARGUMENT = 1,
    DERFKIT_ERR_SHAPE = 2,
    DERFKIT_ERR_PARAMETER = 3,
    DERFKIT_ERR_CONTRACT = 4,
    DERFKIT_ERR_NOT_FOUND = 5,
    DERFKIT_ERR_CONFIG = 6,
    DERFKIT_ERR_IO = 7,
    DERFKIT_ERR_EVALUATION = 8,
    DERFKIT_ERR_OPTIMIZATION = 9,
    DERFKIT_ERR_INTERNAL = 10
} derfkit_status;

typedef struct derfkit_func derfkit_func_t;
typedef struct derfkit_dataset derfkit_dataset_t;

/* Library identity. */
const char* derfkit_version(void);
uint64_t derfkit_catalog_hash(void);

const char* derfkit_last_error(void);
void derfkit_string_free(char* s);

/* Point-wise function catalog. */

/* JSON array of {name, formula, construction_group, search_candidate,
 * declared: {zero_centered, bounded, center_sensitive, monotonic}}. */
derfkit_status derfkit_funcs_list(char** out_json);

derfkit_status derfkit_func_open(const char* name, derfkit_func_t** out);
void derfkit_func_close(derfkit_func_t* f);
derfkit_status derfkit_func_eval_at(const derfkit_func_t* f, double x, double* out_value,
                                    double* out_derivative);
/* Same record as one derfkit_funcs_list entry. */
derfkit_status derfkit_func_info(const derfkit_func_t* f, char** out_json);
/* Measured property report (numeric classifier, default thresholds). */
derfkit_status derfkit_func_classify(const derfkit_func_t* f, char** out_json);

derfkit_status derfkit_erf(double x, double* out);

/* Best L1 fit of tanh(eps*x) to erf(x) on [0, radius]; pass radius <= 0 or
 * tol <= 0 for the defaults (8.0, 1e-6). Returns {eps_star, objective_value,
 * truncation_radius, integration_tolerance}. */
derfkit_status derfkit_fit_eps(double radius, double tol, char** out_json);

/* Synthetic datasets ("DFK1" files). */
derfkit_status derfkit_dataset_generate(const char* spec_json, const char* path);
derfkit_status derfkit_dataset_open(const char* path, derfkit_dataset_t** out);
void derfkit_dataset_close(derfkit_dataset_t* d);
/* Spec plus row counts: {kind, n, ..., train_count, val_count}. */
derfkit_status derfkit_dataset_info(const derfkit_dataset_t* d, char** out_json);

/* Training and experiments. JSON results are deterministic for a fixed spec;
 * wall-clock times are reported separately under "wall_time". */

/* Returns {result: {...}, loss_curve: [...], wall_time: seconds}; writes a
 * checkpoint when checkpoint_path is non-NULL. */
derfkit_status derfkit_train(const char* train_spec_json, const char* checkpoint_path,
                             char** out_json);

/* Returns a report {experiment_kind, master_seed, grid, repeats, trials,
 * ranking, config, version, catalog_hash}. max_threads <= 0 defers to the
 * DERFKIT_THREADS environment variable, then the hardware count. */
derfkit_status derfkit_experiment_run(const char* experiment_spec_json, int max_threads,
                                      char** out_report_json);

/* CSV mirror of a report's trials table. */
derfkit_status derfkit_report_csv(const char* report_json, char** out_csv);

/* Deterministic loss over the training split with stochastic regularization
 * off; max_batches = 0 covers the whole split. */
derfkit_status derfkit_eval_mode_train_loss(const char* checkpoint_path,
                                            const char* dataset_path, uint64_t batch_size,
                                            uint64_t max_batches, double* out_loss);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* DERFKIT_H */
