#pragma once

#include <cstddef>
#include <functional>

namespace derfkit {

// Adaptive Simpson quadrature with Richardson extrapolation. `tol` bounds the
// absolute error of the result under the usual smoothness assumptions.
double integrate_adaptive_simpson(const std::function<double(double)>& f,
                                  double a, double b, double tol);

struct GoldenResult {
    double x = 0.0;
    double fx = 0.0;
    std::size_t evals = 0;
};

// Golden-section search for the minimum of a unimodal function on [lo, hi].
// Errors if the minimizer lands on the bracket boundary (objective monotone
// on the bracket).
GoldenResult golden_section_minimize(const std::function<double(double)>& f,
                                     double lo, double hi, double xtol);

} // namespace derfkit
