#include <doctest.h>

#include "streamdit/evalkit.hpp"
#include "streamdit/posterior.hpp"

using namespace streamdit;

TEST_CASE("posterior dataset covers every start and phase") {
    const toy::PosteriorVelocity p(4);
    CHECK(p.dataset_size(ConditionId{1}) == 13 * 13 * 26);
    CHECK(p.dataset_size(ConditionId{5}) == 14 * 14 * 28);
    CHECK(p.dataset_size(ConditionId::null()) == 4 * (13 * 13 * 26 + 14 * 14 * 28));
    CHECK_THROWS(p.velocity(Clip(5, toy::kFrameShape), NoiseVector::uniform(5, 0.5), ConditionId{1}));
}

TEST_CASE("near the data the posterior velocity points at the clean clip") {
    const toy::PosteriorVelocity p(6, 0.0);
    const Clip x1 = toy::generate_clip(ConditionId{3}, 8, 6).clip;
    Rng rng(2);
    const Clip x0 = gaussian_clip(6, toy::kFrameShape, rng);
    const double t = 0.9;
    const Clip xt = flow::ot_interpolate(x1, x0, t, 0.0);
    const Clip u = p.velocity(xt, NoiseVector::uniform(6, t), ConditionId{3});
    const Clip x1_hat = flow::euler_step(xt, u, 1.0 - t);
    for (std::size_t k = 0; k < x1.size(); ++k) CHECK(x1_hat.data()[k] == doctest::Approx(x1.data()[k]).epsilon(1e-6));
}

TEST_CASE("posterior streams carry the scheduled class") {
    const toy::PosteriorVelocity p(8);
    Rng rng(4);
    const auto schedule = eval::eval_schedule(4, 48);
    const auto r = stream::run_stream(p, partition::preset(partition::Preset::diagonal, 8, 8), schedule, 48, 1.0, rng);
    const auto m = eval::compute_stream_metrics(r.frames, 1, schedule);
    CHECK(m.condition_accuracy == 1.0);
}
