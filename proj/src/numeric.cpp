#include "derfkit/numeric.hpp"

#include "derfkit/errors.hpp"

#include <cmath>
#include <string>

namespace derfkit {

namespace {

double simpson_rule(double fa, double fm, double fb, double h) {
    return h / 6.0 * (fa + 4.0 * fm + fb);
}

double adaptive_step(const std::function<double(double)>& f, double a, double b,
                     double fa, double fm, double fb, double whole, double tol, int depth) {
    const double m = 0.5 * (a + b);
    const double lm = 0.5 * (a + m);
    const double rm = 0.5 * (m + b);
    const double flm = f(lm);
    const double frm = f(rm);
    const double left = simpson_rule(fa, flm, fm, m - a);
    const double right = simpson_rule(fm, frm, fb, b - m);
    const double delta = left + right - whole;
    if (depth <= 0) {
        throw EvaluationError("adaptive Simpson recursion limit reached on [" +
                              std::to_string(a) + ", " + std::to_string(b) + "]");
    }
    if (std::abs(delta) <= 15.0 * tol) {
        return left + right + delta / 15.0;
    }
    return adaptive_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
           adaptive_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

} // namespace

double integrate_adaptive_simpson(const std::function<double(double)>& f,
                                  double a, double b, double tol) {
    if (!(tol > 0.0)) throw ParameterError("integration tolerance must be positive");
    if (a == b) return 0.0;
    const double m = 0.5 * (a + b);
    const double fa = f(a), fm = f(m), fb = f(b);
    const double whole = simpson_rule(fa, fm, fb, b - a);
    return adaptive_step(f, a, b, fa, fm, fb, whole, tol, 60);
}

GoldenResult golden_section_minimize(const std::function<double(double)>& f,
                                     double lo, double hi, double xtol) {
    if (!(lo < hi)) throw ParameterError("golden-section bracket requires lo < hi");
    if (!(xtol > 0.0)) throw ParameterError("golden-section xtol must be positive");
    const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;   // 1/φ
    const double invphi2 = (3.0 - std::sqrt(5.0)) / 2.0;  // 1/φ²
    double a = lo, b = hi;
    double h = b - a;
    double c = a + invphi2 * h;
    double d = a + invphi * h;
    double fc = f(c);
    double fd = f(d);
    std::size_t evals = 2;
    while (h > xtol) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            h = b - a;
            c = a + invphi2 * h;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            h = b - a;
            d = a + invphi * h;
            fd = f(d);
        }
        ++evals;
    }
    GoldenResult res;
    res.x = fc < fd ? c : d;
    res.fx = fc < fd ? fc : fd;
    res.evals = evals;
    const double span = hi - lo;
    if (res.x - lo < 2.0 * xtol || hi - res.x < 2.0 * xtol) {
        throw OptimizationError("golden-section minimizer at bracket edge (x=" +
                                std::to_string(res.x) + " in [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "], span " + std::to_string(span) +
                                "): objective appears monotone on the bracket");
    }
    return res;
}

} // namespace derfkit
