#pragma once

#include <map>
#include <vector>

#include "streamdit/model.hpp"
#include "streamdit/toyworld.hpp"

namespace streamdit::toy {

/// Exact posterior-mean velocity for the toy world: E[x1 - (1 - sigma_min) x0 | x_tau]
/// with x1 uniform over every B-frame window of every class trajectory. The
/// null condition averages over all classes. Stands in for a perfectly trained
/// model when a test needs realistic sprite streams.
class PosteriorVelocity : public VelocityModel {
public:
    explicit PosteriorVelocity(int frames, double sigma_min = flow::kDefaultSigmaMin);

    Clip velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const override;
    FrameShape frame_shape() const override { return kFrameShape; }
    std::size_t dataset_size(ConditionId cond) const;

private:
    int frames_;
    double sigma_min_;
    std::map<int, std::vector<Clip>> windows_;
};

}  // namespace streamdit::toy
