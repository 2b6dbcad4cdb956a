#include "derfkit/funcs.hpp"

#include "derfkit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace derfkit {

namespace {

constexpr double kTwoOverSqrtPi = 1.1283791670955126;  // 2/sqrt(pi)
constexpr double kSqrtPi = 1.7724538509055160;
constexpr double kPi = 3.141592653589793;

// Maclaurin series, adequate for |x| < 2.
double erf_series(double x) {
    double p = x;    // (-1)^n x^(2n+1) / n!
    double sum = x;  // n = 0 term
    for (int n = 1; n < 200; ++n) {
        p *= -x * x / n;
        const double term = p / (2 * n + 1);
        sum += term;
        if (std::abs(term) <= 1e-18 * std::abs(sum)) break;
    }
    return kTwoOverSqrtPi * sum;
}

// Modified Lentz evaluation of the classical continued fraction
// sqrt(pi) e^(x^2) erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
// accurate for x >= 2.
double erfc_cf(double x) {
    const double tiny = 1e-300;
    double f = x, c = x, d = 0.0;
    for (int n = 1; n <= 300; ++n) {
        const double a = 0.5 * n;
        d = x + a * d;
        if (d == 0.0) d = tiny;
        c = x + a / c;
        if (c == 0.0) c = tiny;
        d = 1.0 / d;
        const double delta = c * d;
        f *= delta;
        if (std::abs(delta - 1.0) < 1e-17) break;
    }
    return std::exp(-x * x) / (kSqrtPi * f);
}

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double clipv(double v, double bound) { return std::min(std::max(v, -bound), bound); }

std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace

double erf_eval(double x) {
    if (x == 0.0) return 0.0;
    const double ax = std::abs(x);
    double r = ax < 2.0 ? erf_series(ax) : 1.0 - erfc_cf(ax);
    // Keep the range strictly inside (-1, 1) even when erfc underflows.
    if (r >= 1.0) r = std::nextafter(1.0, 0.0);
    return x < 0.0 ? -r : r;
}

double erf_derivative(double x) { return kTwoOverSqrtPi * std::exp(-x * x); }

double gelu(double x) { return 0.5 * x * (1.0 + erf_eval(x / std::sqrt(2.0))); }

double gelu_derivative(double x) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    const double inv_sqrt2pi = 0.3989422804014327;  // 1/sqrt(2*pi)
    return 0.5 * (1.0 + erf_eval(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

std::string to_string(Monotonicity m) {
    switch (m) {
        case Monotonicity::increasing: return "increasing";
        case Monotonicity::decreasing: return "decreasing";
        case Monotonicity::non_monotonic: return "non_monotonic";
    }
    return "?";
}

std::string to_string(ConstructionGroup g) {
    switch (g) {
        case ConstructionGroup::natural: return "natural";
        case ConstructionGroup::transformed_basic: return "transformed_basic";
        case ConstructionGroup::clipped_unbounded: return "clipped_unbounded";
        case ConstructionGroup::canonical_ratio: return "canonical_ratio";
        case ConstructionGroup::unbounded_probe: return "unbounded_probe";
        case ConstructionGroup::non_monotonic_probe: return "non_monotonic_probe";
    }
    return "?";
}

std::function<bool(double, double)> kink_predicate(std::vector<double> points) {
    return [pts = std::move(points)](double x, double margin) {
        for (double p : pts) {
            if (std::abs(x - p) <= margin) return true;
        }
        return false;
    };
}

namespace {

PointwiseFn make_fn(std::string name, std::string formula, ScalarFn value, ScalarFn deriv,
                    DeclaredProps props, ConstructionGroup group, bool search,
                    std::vector<double> nonsmooth = {}) {
    PointwiseFn f;
    f.name = std::move(name);
    f.formula = std::move(formula);
    f.value = std::move(value);
    f.derivative = std::move(deriv);
    f.props = props;
    f.group = group;
    f.search_candidate = search;
    f.near_kink = kink_predicate(nonsmooth);
    f.nonsmooth_points = std::move(nonsmooth);
    return f;
}

std::vector<PointwiseFn> build_catalog() {
    const DeclaredProps s_inc{true, true, true, Monotonicity::increasing};
    const DeclaredProps probe_inc{true, false, true, Monotonicity::increasing};
    const DeclaredProps bounded_non{true, true, true, Monotonicity::non_monotonic};
    const double half_pi = kPi / 2.0;
    const double e_m1 = std::exp(1.0) - 1.0;             // ln(|x|+1) clip crossing
    const double sqrt_em1 = std::sqrt(std::exp(1.0) - 1.0);  // ln(x^2+1) crossing
    const double sinh1 = std::sinh(1.0);                 // asinh clip crossing

    std::vector<PointwiseFn> cat;
    cat.reserve(25);

    // --- the 16 search candidates, in reported-accuracy order -------------
    cat.push_back(make_fn("erf", "erf(x)", [](double x) { return erf_eval(x); },
                          [](double x) { return erf_derivative(x); }, s_inc,
                          ConstructionGroup::natural, true));
    cat.push_back(make_fn("tanh", "tanh(x)", [](double x) { return std::tanh(x); },
                          [](double x) {
                              const double t = std::tanh(x);
                              return 1.0 - t * t;
                          },
                          s_inc, ConstructionGroup::natural, true));
    cat.push_back(make_fn("satursin", "sin(clip(x, -pi/2, pi/2))",
                          [half_pi](double x) { return std::sin(clipv(x, half_pi)); },
                          [half_pi](double x) { return std::abs(x) <= half_pi ? std::cos(x) : 0.0; },
                          s_inc, ConstructionGroup::transformed_basic, true,
                          {-half_pi, half_pi}));
    cat.push_back(make_fn("arcsinh_clip", "clip(asinh(x), -1, 1)",
                          [](double x) { return clipv(std::asinh(x), 1.0); },
                          [sinh1](double x) {
                              return std::abs(x) <= sinh1 ? 1.0 / std::sqrt(x * x + 1.0) : 0.0;
                          },
                          s_inc, ConstructionGroup::clipped_unbounded, true, {-sinh1, sinh1}));
    cat.push_back(make_fn("isru", "x/sqrt(x^2+1)",
                          [](double x) { return x / std::sqrt(x * x + 1.0); },
                          [](double x) { return std::pow(x * x + 1.0, -1.5); }, s_inc,
                          ConstructionGroup::transformed_basic, true));
    cat.push_back(make_fn("exproot", "sign(x)*(1-exp(-sqrt(|x|)))",
                          [](double x) { return sgn(x) * (1.0 - std::exp(-std::sqrt(std::abs(x)))); },
                          [](double x) {
                              if (x == 0.0) return 0.0;  // unbounded one-sided slope
                              const double r = std::sqrt(std::abs(x));
                              return std::exp(-r) / (2.0 * r);
                          },
                          s_inc, ConstructionGroup::transformed_basic, true, {0.0}));
    cat.push_back(make_fn("linear_clip", "clip(x, -1, 1)",
                          [](double x) { return clipv(x, 1.0); },
                          [](double x) { return std::abs(x) <= 1.0 ? 1.0 : 0.0; }, s_inc,
                          ConstructionGroup::clipped_unbounded, true, {-1.0, 1.0}));
    cat.push_back(make_fn("expsign", "sign(x)*(1-exp(-|x|))",
                          [](double x) { return sgn(x) * (1.0 - std::exp(-std::abs(x))); },
                          [](double x) { return std::exp(-std::abs(x)); }, s_inc,
                          ConstructionGroup::transformed_basic, true, {0.0}));
    cat.push_back(make_fn("logsign_clip", "clip(sign(x)*ln(|x|+1), -1, 1)",
                          [](double x) { return clipv(sgn(x) * std::log1p(std::abs(x)), 1.0); },
                          [e_m1](double x) {
                              return std::abs(x) <= e_m1 ? 1.0 / (std::abs(x) + 1.0) : 0.0;
                          },
                          s_inc, ConstructionGroup::clipped_unbounded, true, {-e_m1, 0.0, e_m1}));
    cat.push_back(make_fn("relsign", "x/(sqrt(x^2+1)+1)",
                          [](double x) { return x / (std::sqrt(x * x + 1.0) + 1.0); },
                          [](double x) {
                              const double s = std::sqrt(x * x + 1.0);
                              return 1.0 / (s * (s + 1.0));
                          },
                          s_inc, ConstructionGroup::transformed_basic, true));
    cat.push_back(make_fn("arctan_scaled", "(2/pi)*arctan(x)",
                          [](double x) { return (2.0 / kPi) * std::atan(x); },
                          [](double x) { return (2.0 / kPi) / (1.0 + x * x); }, s_inc,
                          ConstructionGroup::natural, true));
    cat.push_back(make_fn("smoothsign", "x/(1+|x|)",
                          [](double x) { return x / (1.0 + std::abs(x)); },
                          [](double x) {
                              const double d = 1.0 + std::abs(x);
                              return 1.0 / (d * d);
                          },
                          s_inc, ConstructionGroup::canonical_ratio, true, {0.0}));
    cat.push_back(make_fn("logquad_clip", "clip(sign(x)*ln(x^2+1), -1, 1)",
                          [](double x) { return clipv(sgn(x) * std::log1p(x * x), 1.0); },
                          [sqrt_em1](double x) {
                              return std::abs(x) <= sqrt_em1
                                         ? 2.0 * std::abs(x) / (x * x + 1.0)
                                         : 0.0;
                          },
                          s_inc, ConstructionGroup::clipped_unbounded, true,
                          {-sqrt_em1, 0.0, sqrt_em1}));
    cat.push_back(make_fn("power23_clip", "clip(sign(x)*|x|^(2/3), -1, 1)",
                          [](double x) { return clipv(sgn(x) * std::cbrt(x * x), 1.0); },
                          [](double x) {
                              const double ax = std::abs(x);
                              if (ax == 0.0) return 0.0;  // unbounded one-sided slope
                              if (ax > 1.0) return 0.0;
                              return 2.0 / (3.0 * std::cbrt(ax));
                          },
                          s_inc, ConstructionGroup::clipped_unbounded, true, {-1.0, 0.0, 1.0}));
    cat.push_back(make_fn("saturlog", "sign(x)*L/(L+1), L=ln(|x|+1)",
                          [](double x) {
                              const double l = std::log1p(std::abs(x));
                              return sgn(x) * l / (l + 1.0);
                          },
                          [](double x) {
                              const double l = std::log1p(std::abs(x));
                              const double d = l + 1.0;
                              return 1.0 / ((std::abs(x) + 1.0) * d * d);
                          },
                          s_inc, ConstructionGroup::canonical_ratio, true, {0.0}));
    cat.push_back(make_fn("cubsign", "x^3/(|x|^3+1)",
                          [](double x) {
                              const double a3 = std::abs(x) * x * x;
                              return x * x * x / (a3 + 1.0);
                          },
                          [](double x) {
                              const double a3 = std::abs(x) * x * x;
                              const double d = a3 + 1.0;
                              return 3.0 * x * x / (d * d);
                          },
                          s_inc, ConstructionGroup::transformed_basic, true));

    // --- unbounded growth probes ------------------------------------------
    cat.push_back(make_fn("arcsinh", "asinh(x)", [](double x) { return std::asinh(x); },
                          [](double x) { return 1.0 / std::sqrt(x * x + 1.0); }, probe_inc,
                          ConstructionGroup::unbounded_probe, false));
    cat.push_back(make_fn("logsign", "sign(x)*ln(|x|+1)",
                          [](double x) { return sgn(x) * std::log1p(std::abs(x)); },
                          [](double x) { return 1.0 / (std::abs(x) + 1.0); }, probe_inc,
                          ConstructionGroup::unbounded_probe, false, {0.0}));
    cat.push_back(make_fn("logquad", "sign(x)*ln(x^2+1)",
                          [](double x) { return sgn(x) * std::log1p(x * x); },
                          [](double x) { return 2.0 * std::abs(x) / (x * x + 1.0); }, probe_inc,
                          ConstructionGroup::unbounded_probe, false, {0.0}));
    cat.push_back(make_fn("power23", "sign(x)*|x|^(2/3)",
                          [](double x) { return sgn(x) * std::cbrt(x * x); },
                          [](double x) {
                              const double ax = std::abs(x);
                              if (ax == 0.0) return 0.0;
                              return 2.0 / (3.0 * std::cbrt(ax));
                          },
                          probe_inc, ConstructionGroup::unbounded_probe, false, {0.0}));
    cat.push_back(make_fn("linear", "x", [](double x) { return x; },
                          [](double) { return 1.0; }, probe_inc,
                          ConstructionGroup::unbounded_probe, false));

    // --- monotonicity probes ------------------------------------------------
    cat.push_back(make_fn("sin", "sin(x)", [](double x) { return std::sin(x); },
                          [](double x) { return std::cos(x); }, bounded_non,
                          ConstructionGroup::non_monotonic_probe, false));
    cat.push_back(make_fn("dampx", "2*x/(1+x^2)",
                          [](double x) { return 2.0 * x / (1.0 + x * x); },
                          [](double x) {
                              const double d = 1.0 + x * x;
                              return 2.0 * (1.0 - x * x) / (d * d);
                          },
                          bounded_non, ConstructionGroup::non_monotonic_probe, false));
    cat.push_back(make_fn("dampexp", "2.72*x*exp(-|x|)",
                          [](double x) { return 2.72 * x * std::exp(-std::abs(x)); },
                          [](double x) {
                              return 2.72 * (1.0 - std::abs(x)) * std::exp(-std::abs(x));
                          },
                          bounded_non, ConstructionGroup::non_monotonic_probe, false, {0.0}));
    cat.push_back(make_fn("negerf", "-erf(x)", [](double x) { return -erf_eval(x); },
                          [](double x) { return -erf_derivative(x); },
                          DeclaredProps{true, true, true, Monotonicity::decreasing},
                          ConstructionGroup::non_monotonic_probe, false));
    return cat;
}

// Names resolvable by find_fn but not part of the ranked/classified set.
std::vector<PointwiseFn> build_extras() {
    std::vector<PointwiseFn> extra;
    // Unscaled arctan: sup is pi/2 > the 1.5 boundedness probe cap, so the
    // measured report flags it unbounded; the search uses arctan_scaled.
    extra.push_back(make_fn("arctan_raw", "arctan(x)", [](double x) { return std::atan(x); },
                            [](double x) { return 1.0 / (1.0 + x * x); },
                            DeclaredProps{true, false, true, Monotonicity::increasing},
                            ConstructionGroup::natural, false));
    return extra;
}

std::size_t levenshtein(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

} // namespace

const std::vector<PointwiseFn>& catalog() {
    static const std::vector<PointwiseFn> cat = build_catalog();
    return cat;
}

std::vector<std::string> registered_names() {
    std::vector<std::string> names;
    for (const auto& f : catalog()) names.push_back(f.name);
    names.push_back("arctan");
    names.push_back("arctan_raw");
    return names;
}

const PointwiseFn& find_fn(const std::string& name) {
    const std::string resolved = name == "arctan" ? "arctan_scaled" : name;
    for (const auto& f : catalog()) {
        if (f.name == resolved) return f;
    }
    static const std::vector<PointwiseFn> extras = build_extras();
    for (const auto& f : extras) {
        if (f.name == resolved) return f;
    }
    throw NotFoundError("unknown function '" + name + "'; did you mean '" + suggest_name(name) +
                        "'?");
}

std::string suggest_name(const std::string& name) {
    std::string best;
    std::size_t best_dist = std::numeric_limits<std::size_t>::max();
    for (const std::string& cand : registered_names()) {
        const std::size_t d = levenshtein(name, cand);
        if (d < best_dist) {
            best_dist = d;
            best = cand;
        }
    }
    return best;
}

std::uint64_t catalog_hash() {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
    };
    for (const auto& f : catalog()) {
        mix(f.name);
        mix("|");
        mix(f.formula);
        mix(";");
    }
    return h;
}

PointwiseFn shift(const PointwiseFn& f, ShiftKind kind, double lambda) {
    if (lambda == 0.0) return f;  // exact identity, name included
    PointwiseFn g = f;
    if (kind == ShiftKind::horizontal) {
        g.name = "shift_h(" + f.name + "," + fmt_num(lambda) + ")";
        g.formula = f.formula + " at x+" + fmt_num(lambda);
        g.value = [v = f.value, lambda](double x) { return v(x + lambda); };
        g.derivative = [d = f.derivative, lambda](double x) { return d(x + lambda); };
        g.nonsmooth_points.clear();
        for (double p : f.nonsmooth_points) g.nonsmooth_points.push_back(p - lambda);
        g.near_kink = [base = f.near_kink, lambda](double x, double m) {
            return base(x + lambda, m);
        };
    } else {
        g.name = "shift_v(" + f.name + "," + fmt_num(lambda) + ")";
        g.formula = f.formula + " + " + fmt_num(lambda);
        g.value = [v = f.value, lambda](double x) { return v(x) + lambda; };
        g.derivative = f.derivative;
    }
    g.props.zero_centered = false;
    g.search_candidate = false;
    return g;
}

PointwiseFn clip_bound(const PointwiseFn& f, double lambda_u) {
    if (!(lambda_u > 0.0)) {
        throw ParameterError("clip_bound: clip radius must be positive, got " + fmt_num(lambda_u));
    }
    PointwiseFn g = f;
    g.name = "clip(" + f.name + "," + fmt_num(lambda_u) + ")";
    g.formula = "clip(" + f.formula + ", -" + fmt_num(lambda_u) + ", " + fmt_num(lambda_u) + ")";
    g.value = [v = f.value, lambda_u](double x) { return clipv(v(x), lambda_u); };
    g.derivative = [v = f.value, d = f.derivative, lambda_u](double x) {
        return std::abs(v(x)) > lambda_u ? 0.0 : d(x);
    };
    g.props.bounded = true;
    // Crossings of |f| = lambda_u depend on f; detect them locally instead
    // of listing fixed points.
    g.near_kink = [v = f.value, base = f.near_kink, lambda_u](double x, double m) {
        if (base(x, m)) return true;
        const double lo = std::abs(v(x - m)) - lambda_u;
        const double hi = std::abs(v(x + m)) - lambda_u;
        return lo * hi <= 0.0;
    };
    g.search_candidate = false;
    return g;
}

PointwiseFn mix_linear(const PointwiseFn& f, double lambda_b) {
    if (!(lambda_b > 0.0 && lambda_b < 1.0)) {
        throw ParameterError("mix_linear: mix weight must lie strictly in (0,1), got " +
                             fmt_num(lambda_b));
    }
    if (!f.props.bounded) {
        throw ContractError("mix_linear: base function '" + f.name + "' must be bounded");
    }
    PointwiseFn g = f;
    g.name = "mix(" + f.name + "," + fmt_num(lambda_b) + ")";
    g.formula = "(1-" + fmt_num(lambda_b) + ")*(" + f.formula + ") + " + fmt_num(lambda_b) + "*x";
    g.value = [v = f.value, lambda_b](double x) { return (1.0 - lambda_b) * v(x) + lambda_b * x; };
    g.derivative = [d = f.derivative, lambda_b](double x) {
        return (1.0 - lambda_b) * d(x) + lambda_b;
    };
    g.props.bounded = false;
    g.search_candidate = false;
    return g;
}

PointwiseFn flat_zone(const PointwiseFn& f, double lambda_flat) {
    if (lambda_flat < 0.0) {
        throw ParameterError("flat_zone: half-width must be nonnegative, got " +
                             fmt_num(lambda_flat));
    }
    if (std::abs(f.value(0.0)) > 1e-12) {
        throw ContractError("flat_zone: '" + f.name + "' is not odd (f(0) = " +
                            fmt_num(f.value(0.0)) + ")");
    }
    for (double x : {0.5, 1.0, 2.0, 3.0}) {
        if (std::abs(f.value(x) + f.value(-x)) > 1e-9) {
            throw ContractError("flat_zone: '" + f.name + "' is not odd (f(" + fmt_num(x) +
                                ") + f(-" + fmt_num(x) + ") != 0)");
        }
    }
    if (f.props.monotonic != Monotonicity::increasing) {
        throw ContractError("flat_zone: '" + f.name + "' must be monotone increasing");
    }
    if (lambda_flat == 0.0) return f;  // exact identity, keeps f' at 0 intact
    PointwiseFn g = f;
    g.name = "flat(" + f.name + "," + fmt_num(lambda_flat) + ")";
    g.search_candidate = false;
    g.formula = f.formula + " shifted outward by " + fmt_num(lambda_flat) + ", 0 inside";
    g.value = [v = f.value, l = lambda_flat](double x) {
        if (x > l) return v(x - l);
        if (x < -l) return v(x + l);
        return 0.0;
    };
    g.derivative = [d = f.derivative, l = lambda_flat](double x) {
        if (x > l) return d(x - l);
        if (x < -l) return d(x + l);
        return 0.0;
    };
    g.props.center_sensitive = false;
    g.nonsmooth_points.clear();
    g.nonsmooth_points.push_back(-lambda_flat);
    g.nonsmooth_points.push_back(lambda_flat);
    for (double p : f.nonsmooth_points) {
        if (p > 0.0) g.nonsmooth_points.push_back(p + lambda_flat);
        if (p < 0.0) g.nonsmooth_points.push_back(p - lambda_flat);
    }
    g.near_kink = [base = f.near_kink, l = lambda_flat](double x, double m) {
        if (std::abs(x - l) <= m || std::abs(x + l) <= m) return true;
        if (x > l) return base(x - l, m);
        if (x < -l) return base(x + l, m);
        return false;
    };
    return g;
}

PointwiseFn negate(const PointwiseFn& f) {
    PointwiseFn g = f;
    g.name = "neg(" + f.name + ")";
    g.formula = "-(" + f.formula + ")";
    g.value = [v = f.value](double x) { return -v(x); };
    g.derivative = [d = f.derivative](double x) { return -d(x); };
    if (f.props.monotonic == Monotonicity::increasing) {
        g.props.monotonic = Monotonicity::decreasing;
    } else if (f.props.monotonic == Monotonicity::decreasing) {
        g.props.monotonic = Monotonicity::increasing;
    }
    g.search_candidate = false;
    return g;
}

PointwiseFn scaled_tanh(double eps_tanh) {
    if (!(eps_tanh > 0.0)) {
        throw ParameterError("scaled_tanh: coefficient must be positive, got " +
                             fmt_num(eps_tanh));
    }
    return make_fn("scaled_tanh(" + fmt_num(eps_tanh) + ")",
                   "tanh(" + fmt_num(eps_tanh) + "*x)",
                   [eps_tanh](double x) { return std::tanh(eps_tanh * x); },
                   [eps_tanh](double x) {
                       const double t = std::tanh(eps_tanh * x);
                       return eps_tanh * (1.0 - t * t);
                   },
                   DeclaredProps{true, true, true, Monotonicity::increasing},
                   ConstructionGroup::natural, false);
}

} // namespace derfkit
