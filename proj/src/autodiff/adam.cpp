#include "dnbp/autodiff/adam.hpp"

#include <cmath>

namespace dnbp::ad {

AdamResult adam_step(ParameterBlock& block, const AdamConfig& cfg) {
    for (const auto& p : block.tensors) {
        for (double g : p.grad) {
            if (!std::isfinite(g)) {
                AdamResult r{false, "non-finite gradient in " + block.name + "/" + p.name + "; update skipped"};
                block.zero_grad();
                return r;
            }
        }
    }
    block.step += 1;
    const double t = static_cast<double>(block.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& p : block.tensors) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
            p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
            const double m_hat = p.first_moment[i] / c1;
            const double v_hat = p.second_moment[i] / c2;
            p.value[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
        p.zero_grad();
    }
    return {};
}

}  // namespace dnbp::ad
