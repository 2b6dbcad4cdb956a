#pragma once

#include "derfkit/layers.hpp"
#include "derfkit/tensor.hpp"

#include <string>
#include <vector>

namespace derfkit {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    void validate() const;
};

enum class LrSchedule { constant, cosine };
std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);

// Warmup ramps linearly to base_lr over `warmup` steps, then either holds
// (constant) or follows a half-cosine down to zero at `total`.
double lr_at(double base_lr, LrSchedule schedule, std::size_t step, std::size_t total,
             std::size_t warmup);

// AdamW with decoupled weight decay:
//   p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
class AdamW {
public:
    AdamW(AdamWConfig cfg, const std::vector<Parameter>& params);

    // grads[i] pairs with params[i]; lr is the already-scheduled rate.
    void step(std::vector<Parameter>& params, const std::vector<const Tensor*>& grads,
              double lr);

private:
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

} // namespace derfkit
