#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace derfkit {

using ScalarFn = std::function<double(double)>;

// Gauss error function, |err| <= 1e-10 on [-6,6] against direct quadrature
// of its defining integral; exactly odd; range strictly inside (-1, 1).
double erf_eval(double x);
// d/dx erf(x) = 2/sqrt(pi) * exp(-x^2)
double erf_derivative(double x);

// erf-based GELU used by the feed-forward blocks (smooth everywhere).
double gelu(double x);
double gelu_derivative(double x);

enum class Monotonicity { increasing, decreasing, non_monotonic };
enum class ConstructionGroup {
    natural,
    transformed_basic,
    clipped_unbounded,
    canonical_ratio,
    unbounded_probe,
    non_monotonic_probe,
};

std::string to_string(Monotonicity m);
std::string to_string(ConstructionGroup g);

struct DeclaredProps {
    bool zero_centered = true;
    bool bounded = true;
    bool center_sensitive = true;
    Monotonicity monotonic = Monotonicity::increasing;
};

// A named scalar function with its analytic derivative and the metadata the
// classifier is expected to reproduce. Immutable; freely shareable.
struct PointwiseFn {
    std::string name;
    std::string formula;
    ScalarFn value;
    ScalarFn derivative;
    DeclaredProps props;
    ConstructionGroup group = ConstructionGroup::natural;
    // True for the 16 functions the empirical search ranks; probes are
    // classifier/sweep material only.
    bool search_candidate = false;
    // Inputs where the derivative is discontinuous or one-sided (kinks,
    // clip boundaries); finite-difference checks stay clear of these.
    std::vector<double> nonsmooth_points;
    // True when x is within `margin` of a nonsmooth input. Transform
    // wrappers extend this beyond the fixed point list (clip crossings
    // depend on the composed function).
    std::function<bool(double, double)> near_kink;
};

// Builds a near_kink predicate from a fixed point list.
std::function<bool(double, double)> kink_predicate(std::vector<double> points);

// The full registered set: 16 search candidates, 5 unbounded growth probes,
// 4 monotonicity probes. Order is fixed.
const std::vector<PointwiseFn>& catalog();

// Name lookup over the catalog plus extra exposed names ("arctan" resolves
// to the rescaled catalog entry, "arctan_raw" to the unscaled function).
// Unknown names raise a not-found error carrying the nearest-name suggestion.
const PointwiseFn& find_fn(const std::string& name);
// Nearest registered name by edit distance.
std::string suggest_name(const std::string& name);
std::vector<std::string> registered_names();

// FNV-1a over the catalog names and formulas; reports embed it so results
// from a stale catalog are detectable.
std::uint64_t catalog_hash();

enum class ShiftKind { horizontal, vertical };

// Input shift f(x+lambda) or output shift f(x)+lambda.
PointwiseFn shift(const PointwiseFn& f, ShiftKind kind, double lambda);
// clamp(f(x), -lambda_u, lambda_u); derivative passes through at the
// boundary and is zero strictly beyond it.
PointwiseFn clip_bound(const PointwiseFn& f, double lambda_u);
// (1-lambda_b) f(x) + lambda_b x; requires bounded f, lambda_b in (0,1).
PointwiseFn mix_linear(const PointwiseFn& f, double lambda_b);
// Zero on [-lambda, lambda], the positive/negative branches shifted outward.
// Requires an odd, monotone-increasing f.
PointwiseFn flat_zone(const PointwiseFn& f, double lambda_flat);
// -f(x); flips the monotonicity flag.
PointwiseFn negate(const PointwiseFn& f);
// tanh(eps * x).
PointwiseFn scaled_tanh(double eps_tanh);

} // namespace derfkit
