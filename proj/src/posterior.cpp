#include "streamdit/posterior.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace streamdit::toy {

PosteriorVelocity::PosteriorVelocity(int frames, double sigma_min) : frames_(frames), sigma_min_(sigma_min) {
    if (frames < 1) throw std::invalid_argument("PosteriorVelocity: frames must be positive");
    if (!(sigma_min >= 0.0 && sigma_min < 1.0)) throw std::invalid_argument("PosteriorVelocity: sigma_min outside [0, 1)");
    for (int id = 1; id <= kNumClasses; ++id) {
        const SpriteClass cls = SpriteClass::from_id(ConditionId{id});
        const int size = cls.shape == Shape::square ? 4 : 3;
        const int span = kFrameSize - size + 1;
        const double half = size / 2.0;
        // one bounce period past every start covers every phase
        const int period = 2 * span;
        auto& out = windows_[id];
        for (int x = 0; x < span; ++x) {
            for (int y = 0; y < span; ++y) {
                const Clip track = generate_clip_from(cls, {x + half, y + half}, frames + period).clip;
                for (int off = 0; off < period; ++off) out.push_back(track.slice(off, frames));
            }
        }
    }
}

std::size_t PosteriorVelocity::dataset_size(ConditionId cond) const {
    std::size_t n = 0;
    for (const auto& [id, v] : windows_)
        if (cond.is_null() || id == cond.value()) n += v.size();
    return n;
}

Clip PosteriorVelocity::velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const {
    if (x.frames() != frames_ || tau.size() != frames_) throw std::invalid_argument("PosteriorVelocity: buffer length mismatch");
    if (x.frame_shape() != kFrameShape) throw std::invalid_argument("PosteriorVelocity: frame shape mismatch");
    if (!cond.is_null() && !windows_.contains(cond.value())) throw std::out_of_range("PosteriorVelocity: unknown class");

    std::vector<const Clip*> candidates;
    for (const auto& [id, v] : windows_)
        if (cond.is_null() || id == cond.value())
            for (const Clip& c : v) candidates.push_back(&c);

    // x_tau | x1 ~ N(tau x1, sd^2) per frame with sd = 1 - (1 - sigma_min) tau
    std::vector<double> inv_var(static_cast<std::size_t>(frames_));
    for (int j = 0; j < frames_; ++j) {
        const double sd = 1.0 - (1.0 - sigma_min_) * tau[j];
        inv_var[static_cast<std::size_t>(j)] = 1.0 / (sd * sd);
    }
    std::vector<double> logw(candidates.size());
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        double s = 0.0;
        for (int j = 0; j < frames_; ++j) {
            auto a = x.frame(j);
            auto b = candidates[i]->frame(j);
            double d2 = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                const double d = a[k] - tau[j] * b[k];
                d2 += d * d;
            }
            s -= 0.5 * d2 * inv_var[static_cast<std::size_t>(j)];
        }
        logw[i] = s;
        best = std::max(best, s);
    }
    Clip mean(frames_, kFrameShape);
    double z = 0.0;
    auto m = mean.data();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double w = std::exp(logw[i] - best);
        if (w < 1e-300) continue;
        z += w;
        auto c = candidates[i]->data();
        for (std::size_t k = 0; k < m.size(); ++k) m[k] += w * c[k];
    }
    for (double& v : m) v /= z;

    Clip u(frames_, kFrameShape);
    for (int j = 0; j < frames_; ++j) {
        if (tau[j] >= 1.0) continue;
        const double sd = 1.0 - (1.0 - sigma_min_) * tau[j];
        auto out = u.frame(j);
        auto x1 = mean.frame(j);
        auto xt = x.frame(j);
        for (std::size_t k = 0; k < out.size(); ++k) {
            // x0 = (x_tau - tau x1) / sd is linear in x1, so the posterior mean passes through
            out[k] = x1[k] - (1.0 - sigma_min_) * (xt[k] - tau[j] * x1[k]) / sd;
        }
    }
    return u;
}

}  // namespace streamdit::toy
