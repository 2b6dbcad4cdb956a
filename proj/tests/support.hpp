#pragma once

#include "derfkit/dataset.hpp"
#include "derfkit/tape.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace testsupport {

// Builds the graph from already-bound leaves and returns the scalar loss Var.
using GraphBuilder =
    std::function<derfkit::Var(derfkit::Tape&, const std::vector<derfkit::Var>&)>;

struct GradCheck {
    double worst_violation = -1.0;  // |grad - fd| - (rel*|fd| + floor); pass <= 0
    double worst_grad = 0.0;
    double worst_fd = 0.0;
    std::string worst_at;

    bool ok() const { return worst_violation <= 0.0; }
};

inline double eval_loss(const GraphBuilder& build, const std::vector<derfkit::Tensor>& inputs) {
    derfkit::Tape tape;
    std::vector<derfkit::Var> vars;
    vars.reserve(inputs.size());
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    return tape.value(build(tape, vars)).item();
}

// Central finite differences on every coordinate of every input, against the
// analytic reverse-mode gradient.
inline GradCheck gradcheck(const GraphBuilder& build, std::vector<derfkit::Tensor> inputs,
                           double rel = 1e-4, double floor = 1e-7, double h = 1e-4) {
    derfkit::Tape tape;
    std::vector<derfkit::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    tape.backward(build(tape, vars));
    std::vector<derfkit::Tensor> grads;
    for (auto v : vars) grads.push_back(tape.grad(v));

    GradCheck result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            const double orig = inputs[i][j];
            inputs[i][j] = orig + h;
            const double fp = eval_loss(build, inputs);
            inputs[i][j] = orig - h;
            const double fm = eval_loss(build, inputs);
            inputs[i][j] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double g = grads[i][j];
            const double violation = std::abs(g - fd) - (rel * std::abs(fd) + floor);
            if (violation > result.worst_violation) {
                result.worst_violation = violation;
                result.worst_grad = g;
                result.worst_fd = fd;
                result.worst_at =
                    "input " + std::to_string(i) + " coord " + std::to_string(j);
            }
        }
    }
    return result;
}

// Five-point Richardson differences: truncation error O(h^4), for deep
// compositions where the O(h^2) central-difference error tops 1e-7.
inline GradCheck gradcheck_richardson(const GraphBuilder& build,
                                      std::vector<derfkit::Tensor> inputs, double rel = 1e-3,
                                      double floor = 1e-7, double h = 1e-4) {
    derfkit::Tape tape;
    std::vector<derfkit::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    tape.backward(build(tape, vars));
    std::vector<derfkit::Tensor> grads;
    for (auto v : vars) grads.push_back(tape.grad(v));

    GradCheck result;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
            const double orig = inputs[i][j];
            auto at = [&](double x) {
                inputs[i][j] = x;
                return eval_loss(build, inputs);
            };
            const double wide = at(orig + h) - at(orig - h);
            const double narrow = at(orig + h / 2) - at(orig - h / 2);
            inputs[i][j] = orig;
            const double fd = (8.0 * narrow - wide) / (6.0 * h);
            const double g = grads[i][j];
            const double violation = std::abs(g - fd) - (rel * std::abs(fd) + floor);
            if (violation > result.worst_violation) {
                result.worst_violation = violation;
                result.worst_grad = g;
                result.worst_fd = fd;
                result.worst_at =
                    "input " + std::to_string(i) + " coord " + std::to_string(j);
            }
        }
    }
    return result;
}

// Nudges values so alpha*x + s stays clear of f's nonsmooth points; finite
// differences straddle kinks otherwise.
inline void keep_off_kinks(derfkit::Tensor& x, const derfkit::PointwiseFn& f, double alpha,
                           double s, double margin = 1e-2) {
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double u = alpha * x[i] + s;
        int guard = 0;
        while (f.near_kink(u, margin) && guard++ < 64) {
            x[i] += 3.0 * margin / (alpha == 0.0 ? 1.0 : std::abs(alpha));
            u = alpha * x[i] + s;
        }
    }
}

// Plain recursive adaptive Simpson, independent of the library's integrator.
inline double simpson_oracle(const std::function<double(double)>& f, double a, double b,
                             double tol) {
    struct Impl {
        const std::function<double(double)>& f;
        static double simpson(double a, double fa, double b, double fb, double fm) {
            return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        }
        double go(double a, double fa, double b, double fb, double fm, double whole,
                  double tol, int depth) const {
            const double m = 0.5 * (a + b);
            const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
            const double flm = f(lm), frm = f(rm);
            const double left = simpson(a, fa, m, fm, flm);
            const double right = simpson(m, fm, b, fb, frm);
            const double delta = left + right - whole;
            if (depth >= 60 || std::abs(delta) <= 15.0 * tol) {
                return left + right + delta / 15.0;
            }
            return go(a, fa, m, fm, flm, left, tol / 2.0, depth + 1) +
                   go(m, fm, b, fb, frm, right, tol / 2.0, depth + 1);
        }
    };
    Impl impl{f};
    const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
    const double whole = Impl::simpson(a, fa, b, fb, fm);
    return impl.go(a, fa, b, fb, fm, whole, tol, 0);
}

// Binary logistic regression on mean token embeddings; validation accuracy.
inline double logistic_probe_accuracy(const derfkit::Dataset& ds, int epochs = 300,
                                      double lr = 1.0) {
    const std::size_t c = ds.spec.c_in, t_len = ds.spec.seq_len;
    const std::size_t n_train = ds.train_count(), n = ds.size();
    auto mean_embed = [&](std::size_t row, std::vector<double>& out) {
        for (std::size_t j = 0; j < c; ++j) out[j] = 0.0;
        const double* p = ds.inputs.data() + row * t_len * c;
        for (std::size_t t = 0; t < t_len; ++t) {
            for (std::size_t j = 0; j < c; ++j) out[j] += p[t * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(t_len);
    };

    std::vector<double> w(c, 0.0), feat(c);
    double b = 0.0;
    for (int e = 0; e < epochs; ++e) {
        std::vector<double> gw(c, 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < n_train; ++i) {
            mean_embed(i, feat);
            double z = b;
            for (std::size_t j = 0; j < c; ++j) z += w[j] * feat[j];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double err = p - static_cast<double>(ds.labels[i]);
            for (std::size_t j = 0; j < c; ++j) gw[j] += err * feat[j];
            gb += err;
        }
        for (std::size_t j = 0; j < c; ++j) w[j] -= lr * gw[j] / static_cast<double>(n_train);
        b -= lr * gb / static_cast<double>(n_train);
    }

    std::size_t correct = 0;
    for (std::size_t i = n_train; i < n; ++i) {
        mean_embed(i, feat);
        double z = b;
        for (std::size_t j = 0; j < c; ++j) z += w[j] * feat[j];
        if ((z > 0.0 ? 1 : 0) == ds.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n - n_train);
}

} // namespace testsupport
