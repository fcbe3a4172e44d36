#pragma once

#include <optional>
#include <vector>

#include "streamdit/tensor.hpp"

namespace streamdit::flow {

inline constexpr double kDefaultSigmaMin = 0.001;

// OT path X_t = t X1 + (1 - (1 - sigma_min) t) X0.
Clip ot_interpolate(const Clip& x1, const Clip& x0, double t, double sigma_min);

// Velocity of the OT path; independent of t.
Clip target_velocity(const Clip& x1, const Clip& x0, double sigma_min);

Clip euler_step(const Clip& x, const Clip& u, double dt);

// Per-frame OT path: frame j uses tau[j]. The same x0 must feed target_velocity.
Clip buffered_interpolate(const Clip& x1, const Clip& x0, const NoiseVector& tau, double sigma_min);

// Frame j advances by u[j] * dtau[j].
Clip buffered_euler_step(const Clip& x, const Clip& u, std::span<const double> dtau);

/// Mean squared error over the frames whose mask entry is true. With no mask
/// every frame counts. Throws if the mask keeps nothing.
double fm_loss(const Clip& pred, const Clip& target,
               const std::optional<std::vector<bool>>& frame_mask = std::nullopt);

// u_uncond + w (u_cond - u_uncond)
Clip cfg_combine(const Clip& u_cond, const Clip& u_uncond, double w);

}  // namespace streamdit::flow
