#include "derfkit/optimizer.hpp"

#include "derfkit/errors.hpp"

#include <cmath>

namespace derfkit {

void AdamWConfig::validate() const {
    std::vector<std::string> bad;
    if (!(lr >= 0.0) || !std::isfinite(lr)) bad.push_back("lr must be finite and >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) bad.push_back("beta1 must lie in (0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) bad.push_back("beta2 must lie in (0, 1)");
    if (!(eps > 0.0)) bad.push_back("eps must be positive");
    if (!(weight_decay >= 0.0)) bad.push_back("weight_decay must be >= 0");
    if (!bad.empty()) {
        std::string msg = "invalid optimizer config: " + bad[0];
        for (std::size_t i = 1; i < bad.size(); ++i) msg += "; " + bad[i];
        throw ConfigError(msg);
    }
}

std::string to_string(LrSchedule s) {
    return s == LrSchedule::constant ? "constant" : "cosine";
}

LrSchedule lr_schedule_from_string(const std::string& s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "cosine") return LrSchedule::cosine;
    throw ConfigError("unknown lr schedule '" + s + "' (expected constant or cosine)");
}

double lr_at(double base_lr, LrSchedule schedule, std::size_t step, std::size_t total,
             std::size_t warmup) {
    if (warmup > 0 && step < warmup) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (schedule == LrSchedule::constant) return base_lr;
    if (total <= warmup + 1) return base_lr;
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(total - 1 - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

AdamW::AdamW(AdamWConfig cfg, const std::vector<Parameter>& params) : cfg_(std::move(cfg)) {
    cfg_.validate();
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
        m_.push_back(Tensor::zeros(p.value.shape()));
        v_.push_back(Tensor::zeros(p.value.shape()));
    }
}

void AdamW::step(std::vector<Parameter>& params, const std::vector<const Tensor*>& grads,
                 double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw ShapeError("optimizer step: got " + std::to_string(params.size()) +
                         " params / " + std::to_string(grads.size()) + " grads, expected " +
                         std::to_string(m_.size()));
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i].value.data();
        const double* g = grads[i]->data();
        double* m = m_[i].data();
        double* v = v_[i].data();
        const std::size_t n = params[i].value.numel();
        if (grads[i]->numel() != n) {
            throw ShapeError("optimizer step: grad shape mismatch for '" + params[i].name + "'");
        }
        for (std::size_t j = 0; j < n; ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] -= lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * p[j]);
        }
    }
}

} // namespace derfkit
