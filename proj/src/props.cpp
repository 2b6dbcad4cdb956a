#include "derfkit/props.hpp"

#include "derfkit/errors.hpp"
#include "derfkit/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace derfkit {

namespace {

std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

double eval_checked(const PointwiseFn& f, double x) {
    const double v = f.value(x);
    if (!std::isfinite(v)) {
        throw EvaluationError("classify: '" + f.name + "' is non-finite at x = " + fmt_num(x));
    }
    return v;
}

std::vector<double> log_spaced(double lo, double hi, std::size_t n) {
    std::vector<double> xs(n);
    const double llo = std::log(lo), lhi = std::log(hi);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        xs[i] = std::exp(llo + t * (lhi - llo));
    }
    return xs;
}

int growth_rank(GrowthClass g) {
    switch (g) {
        case GrowthClass::bounded: return 0;
        case GrowthClass::logarithmic: return 1;
        case GrowthClass::sublinear_power: return 2;
        case GrowthClass::linear_or_faster: return 3;
    }
    return 4;
}

} // namespace

std::string to_string(GrowthClass g) {
    switch (g) {
        case GrowthClass::bounded: return "bounded";
        case GrowthClass::logarithmic: return "logarithmic";
        case GrowthClass::sublinear_power: return "sublinear_power";
        case GrowthClass::linear_or_faster: return "linear_or_faster";
    }
    return "?";
}

PropertyReport classify(const PointwiseFn& f, const PropsConfig& cfg) {
    PropertyReport rep;

    // Zero-centeredness: worst symmetric-pair average over a uniform grid on
    // [0, 8] and log-spaced probes out to the probe maximum.
    rep.f0 = eval_checked(f, 0.0);
    double asym = 0.0;
    for (std::size_t i = 1; i <= 800; ++i) {
        const double x = static_cast<double>(i) * (8.0 / 800.0);
        asym = std::max(asym, std::abs(eval_checked(f, x) + eval_checked(f, -x)) / 2.0);
    }
    for (double x : log_spaced(8.0, cfg.probe_max, 200)) {
        asym = std::max(asym, std::abs(eval_checked(f, x) + eval_checked(f, -x)) / 2.0);
    }
    rep.asymmetry = asym;
    rep.zero_centered = asym <= cfg.zc_threshold && std::abs(rep.f0) <= cfg.zc_threshold;

    // Boundedness: sup |f| over log-spaced probes on both signs plus 0.
    double sup = std::abs(rep.f0);
    for (double x : log_spaced(1e-8, cfg.probe_max, cfg.bound_samples)) {
        sup = std::max(sup, std::abs(eval_checked(f, x)));
        sup = std::max(sup, std::abs(eval_checked(f, -x)));
    }
    rep.sup_abs = sup;
    rep.bounded = sup <= cfg.bound_cap;

    // Center sensitivity: half-width of the region around 0 where |f| stays
    // below cs_level; small half-width means the function reacts near zero.
    if (std::abs(rep.f0) >= cfg.cs_level) {
        rep.cs_halfwidth = 0.0;
    } else {
        rep.cs_halfwidth = 8.0;  // no response anywhere on the scan range
        for (double x : log_spaced(1e-8, 8.0, 4000)) {
            if (std::abs(eval_checked(f, x)) >= cfg.cs_level ||
                std::abs(eval_checked(f, -x)) >= cfg.cs_level) {
                rep.cs_halfwidth = x;
                break;
            }
        }
    }
    rep.center_sensitive = rep.cs_halfwidth <= cfg.cs_halfwidth_cap;

    // Monotonicity: successive differences over a uniform grid.
    double prev = eval_checked(f, cfg.mono_lo);
    for (std::size_t i = 1; i < cfg.mono_grid; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(cfg.mono_grid - 1);
        const double x = cfg.mono_lo + t * (cfg.mono_hi - cfg.mono_lo);
        const double cur = eval_checked(f, x);
        const double d = cur - prev;
        if (d > cfg.mono_tol) ++rep.increasing_steps;
        if (d < -cfg.mono_tol) ++rep.decreasing_steps;
        prev = cur;
    }
    if (rep.decreasing_steps == 0) {
        rep.monotonic = Monotonicity::increasing;
    } else if (rep.increasing_steps == 0) {
        rep.monotonic = Monotonicity::decreasing;
    } else {
        rep.monotonic = Monotonicity::non_monotonic;
    }

    // Growth class: least-squares slope of log|f| against log x.
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const auto xs = log_spaced(cfg.growth_lo, cfg.growth_hi, cfg.growth_samples);
    for (double x : xs) {
        const double lx = std::log(x);
        const double ly = std::log(std::max(std::abs(eval_checked(f, x)), 1e-300));
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double n = static_cast<double>(xs.size());
    rep.growth_slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    rep.sup_at_probe_max = std::max(std::abs(eval_checked(f, cfg.probe_max)),
                                    std::abs(eval_checked(f, -cfg.probe_max)));
    if (rep.bounded) {
        rep.growth_class = GrowthClass::bounded;
    } else if (rep.growth_slope < cfg.log_slope_cutoff) {
        rep.growth_class = GrowthClass::logarithmic;
    } else if (rep.growth_slope < cfg.linear_slope_cutoff) {
        rep.growth_class = GrowthClass::sublinear_power;
    } else {
        rep.growth_class = GrowthClass::linear_or_faster;
    }
    return rep;
}

bool report_matches_declared(const PropertyReport& r, const DeclaredProps& d) {
    return r.zero_centered == d.zero_centered && r.bounded == d.bounded &&
           r.center_sensitive == d.center_sensitive && r.monotonic == d.monotonic;
}

std::vector<std::string> growth_ordering(const std::vector<PointwiseFn>& fs,
                                         const PropsConfig& cfg) {
    struct Entry {
        std::string name;
        int rank;
        double sup;
    };
    std::vector<Entry> entries;
    entries.reserve(fs.size());
    for (const auto& f : fs) {
        const PropertyReport rep = classify(f, cfg);
        if (rep.bounded) {
            throw ContractError("growth_ordering: '" + f.name +
                                "' is bounded; only unbounded probes can be ordered");
        }
        entries.push_back({f.name, growth_rank(rep.growth_class), rep.sup_at_probe_max});
    }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.rank != b.rank) return a.rank < b.rank;
        if (a.sup != b.sup) return a.sup < b.sup;
        return a.name < b.name;
    });
    std::vector<std::string> names;
    names.reserve(entries.size());
    for (auto& e : entries) names.push_back(std::move(e.name));
    return names;
}

double eps_objective(double eps, double truncation_radius, double integ_tol) {
    // The integrand is even, so integrate the positive half and double it.
    const auto integrand = [eps](double x) {
        return std::abs(std::tanh(eps * x) - erf_eval(x));
    };
    return 2.0 * integrate_adaptive_simpson(integrand, 0.0, truncation_radius, integ_tol / 2.0);
}

EpsFitResult fit_eps(double truncation_radius, double tol) {
    if (!(truncation_radius >= 6.0)) {
        throw ParameterError("fit_eps: truncation radius must be >= 6, got " +
                             fmt_num(truncation_radius));
    }
    if (!(tol > 0.0)) throw ParameterError("fit_eps: tolerance must be positive");
    const double integ_tol = 1e-10;
    const auto objective = [truncation_radius, integ_tol](double eps) {
        return eps_objective(eps, truncation_radius, integ_tol);
    };
    const GoldenResult res = golden_section_minimize(objective, 0.8, 1.6, tol);
    EpsFitResult out;
    out.eps_star = res.x;
    out.objective_value = res.fx;
    out.truncation_radius = truncation_radius;
    out.integration_tolerance = integ_tol;
    return out;
}

} // namespace derfkit
