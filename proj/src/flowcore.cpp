#include "streamdit/flowcore.hpp"

#include <stdexcept>

namespace streamdit::flow {

namespace {

void require_same_shape(const Clip& a, const Clip& b, const char* what) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

void require_sigma(double sigma_min) {
    if (!(sigma_min >= 0.0 && sigma_min < 1.0)) {
        throw std::out_of_range("sigma_min must lie in [0, 1)");
    }
}

}  // namespace

Clip ot_interpolate(const Clip& x1, const Clip& x0, double t, double sigma_min) {
    require_same_shape(x1, x0, "ot_interpolate");
    require_sigma(sigma_min);
    if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("ot_interpolate: t outside [0, 1]");
    Clip out = x0;
    const double noise_coef = 1.0 - (1.0 - sigma_min) * t;
    auto o = out.data();
    auto a = x1.data();
    auto b = x0.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = t * a[i] + noise_coef * b[i];
    return out;
}

Clip target_velocity(const Clip& x1, const Clip& x0, double sigma_min) {
    require_same_shape(x1, x0, "target_velocity");
    require_sigma(sigma_min);
    Clip out = x1;
    auto o = out.data();
    auto b = x0.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] -= (1.0 - sigma_min) * b[i];
    return out;
}

Clip euler_step(const Clip& x, const Clip& u, double dt) {
    require_same_shape(x, u, "euler_step");
    if (!(dt >= 0.0)) throw std::out_of_range("euler_step: negative dt");
    Clip out = x;
    auto o = out.data();
    auto v = u.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i] * dt;
    return out;
}

Clip buffered_interpolate(const Clip& x1, const Clip& x0, const NoiseVector& tau, double sigma_min) {
    require_same_shape(x1, x0, "buffered_interpolate");
    require_sigma(sigma_min);
    if (tau.size() != x1.frames()) throw std::invalid_argument("buffered_interpolate: tau length mismatch");
    Clip out = x0;
    for (int j = 0; j < out.frames(); ++j) {
        const double t = tau[j];
        const double noise_coef = 1.0 - (1.0 - sigma_min) * t;
        auto o = out.frame(j);
        auto a = x1.frame(j);
        auto b = x0.frame(j);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = t * a[i] + noise_coef * b[i];
    }
    return out;
}

Clip buffered_euler_step(const Clip& x, const Clip& u, std::span<const double> dtau) {
    require_same_shape(x, u, "buffered_euler_step");
    if (static_cast<int>(dtau.size()) != x.frames()) {
        throw std::invalid_argument("buffered_euler_step: dtau length mismatch");
    }
    Clip out = x;
    for (int j = 0; j < out.frames(); ++j) {
        const double dt = dtau[static_cast<std::size_t>(j)];
        if (!(dt >= 0.0)) throw std::out_of_range("buffered_euler_step: negative step");
        auto o = out.frame(j);
        auto v = u.frame(j);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i] * dt;
    }
    return out;
}

double fm_loss(const Clip& pred, const Clip& target, const std::optional<std::vector<bool>>& frame_mask) {
    require_same_shape(pred, target, "fm_loss");
    if (frame_mask && static_cast<int>(frame_mask->size()) != pred.frames()) {
        throw std::invalid_argument("fm_loss: mask length mismatch");
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (int j = 0; j < pred.frames(); ++j) {
        if (frame_mask && !(*frame_mask)[static_cast<std::size_t>(j)]) continue;
        auto p = pred.frame(j);
        auto t = target.frame(j);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double d = p[i] - t[i];
            sum += d * d;
        }
        count += p.size();
    }
    if (count == 0) throw std::invalid_argument("fm_loss: mask excludes every frame");
    return sum / static_cast<double>(count);
}

Clip cfg_combine(const Clip& u_cond, const Clip& u_uncond, double w) {
    require_same_shape(u_cond, u_uncond, "cfg_combine");
    if (!(w >= 0.0)) throw std::out_of_range("cfg_combine: negative guidance scale");
    if (w == 1.0) return u_cond;
    Clip out = u_uncond;
    auto o = out.data();
    auto c = u_cond.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += w * (c[i] - o[i]);
    return out;
}

}  // namespace streamdit::flow
