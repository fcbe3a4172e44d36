#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "streamdit/flowcore.hpp"
#include "streamdit/random.hpp"

using namespace streamdit;
using namespace streamdit::flow;

namespace {

const FrameShape kPix{1, 1, 1};

Clip scalar_clip(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return Clip(n, kPix, std::move(v));
}

Clip random_clip(int frames, Rng& rng) { return gaussian_clip(frames, {1, 3, 2}, rng); }

double max_abs_diff(const Clip& a, const Clip& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("ot_interpolate endpoints and midpoint") {
    CHECK(ot_interpolate(scalar_clip({2.0}), scalar_clip({-1.0}), 0.0, 0.1).data()[0] == -1.0);
    CHECK(ot_interpolate(scalar_clip({1.0}), scalar_clip({0.5}), 1.0, 0.1).data()[0] == doctest::Approx(1.05));
    CHECK(ot_interpolate(scalar_clip({2.0}), scalar_clip({-1.0}), 0.5, 0.0).data()[0] == 0.5);
}

TEST_CASE("ot_interpolate rejects bad arguments") {
    CHECK_THROWS_AS(ot_interpolate(scalar_clip({1.0}), scalar_clip({1.0, 2.0}), 0.5, 0.0), std::invalid_argument);
    CHECK_THROWS(ot_interpolate(scalar_clip({1.0}), scalar_clip({1.0}), 1.5, 0.0));
    CHECK_THROWS(ot_interpolate(scalar_clip({1.0}), scalar_clip({1.0}), 0.5, 1.0));
}

TEST_CASE("target_velocity values") {
    CHECK(target_velocity(scalar_clip({2.0}), scalar_clip({-1.0}), 0.0).data()[0] == 3.0);
    CHECK(target_velocity(scalar_clip({1.0}), scalar_clip({0.5}), 0.1).data()[0] == doctest::Approx(0.55));
}

TEST_CASE("target_velocity is the t-derivative of the path") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Clip x1 = random_clip(3, rng);
        const Clip x0 = random_clip(3, rng);
        const double sigma = 0.2 * uniform01(rng);
        const double t = 0.05 + 0.9 * uniform01(rng);
        const double h = 1e-4;
        const Clip up = ot_interpolate(x1, x0, t + h, sigma);
        const Clip dn = ot_interpolate(x1, x0, t - h, sigma);
        const Clip v = target_velocity(x1, x0, sigma);
        for (std::size_t i = 0; i < v.size(); ++i) {
            CHECK(std::abs((up.data()[i] - dn.data()[i]) / (2 * h) - v.data()[i]) < 1e-6);
        }
    }
}

TEST_CASE("euler_step") {
    CHECK(euler_step(scalar_clip({0.5}), scalar_clip({2.0}), 0.25).data()[0] == 1.0);
    Rng rng(3);
    const Clip x = random_clip(2, rng);
    const Clip u = random_clip(2, rng);
    CHECK(euler_step(x, u, 0.0) == x);

    Clip y = x;
    const int T = 37;
    for (int i = 0; i < T; ++i) y = euler_step(y, u, 1.0 / T);
    Clip expected = x;
    for (std::size_t i = 0; i < x.size(); ++i) expected.data()[i] += u.data()[i];
    CHECK(max_abs_diff(y, expected) < 1e-6);
    CHECK_THROWS(euler_step(x, u, -0.1));
}

TEST_CASE("buffered_interpolate reduces to the scalar path") {
    Rng rng(5);
    const Clip x1 = random_clip(4, rng);
    const Clip x0 = random_clip(4, rng);
    for (double t : {0.0, 0.3, 0.77, 1.0}) {
        CHECK(buffered_interpolate(x1, x0, NoiseVector::uniform(4, t), 0.001) == ot_interpolate(x1, x0, t, 0.001));
    }
}

TEST_CASE("buffered_interpolate frame endpoints") {
    Rng rng(6);
    const Clip x1 = random_clip(2, rng);
    const Clip x0 = random_clip(2, rng);
    const Clip out = buffered_interpolate(x1, x0, NoiseVector({0.0, 1.0}), 0.0);
    CHECK(out.slice(0, 1) == x0.slice(0, 1));
    CHECK(out.slice(1, 1) == x1.slice(1, 1));
}

TEST_CASE("buffered_interpolate matches a frame-wise oracle") {
    Rng rng(7);
    const Clip x1 = random_clip(6, rng);
    const Clip x0 = random_clip(6, rng);
    std::vector<double> tau(6);
    for (double& t : tau) t = uniform01(rng);
    const Clip out = buffered_interpolate(x1, x0, NoiseVector(tau), 0.01);
    for (int j = 0; j < 6; ++j) {
        const Clip want = ot_interpolate(x1.slice(j, 1), x0.slice(j, 1), tau[static_cast<std::size_t>(j)], 0.01);
        CHECK(max_abs_diff(out.slice(j, 1), want) < 1e-7);
    }
    CHECK_THROWS_AS(buffered_interpolate(x1, x0, NoiseVector({0.5}), 0.0), std::invalid_argument);
}

TEST_CASE("buffered_euler_step") {
    Rng rng(8);
    const Clip x = random_clip(5, rng);
    const Clip u = random_clip(5, rng);
    const std::vector<double> zero(5, 0.0);
    CHECK(buffered_euler_step(x, u, zero) == x);

    const std::vector<double> uniform(5, 1.0 / 16);
    CHECK(buffered_euler_step(x, u, uniform) == euler_step(x, u, 1.0 / 16));

    std::vector<double> dtau(5);
    for (double& d : dtau) d = uniform01(rng);
    const Clip out = buffered_euler_step(x, u, dtau);
    for (int j = 0; j < 5; ++j) {
        CHECK(max_abs_diff(out.slice(j, 1), euler_step(x.slice(j, 1), u.slice(j, 1), dtau[static_cast<std::size_t>(j)])) < 1e-7);
    }
    CHECK_THROWS(buffered_euler_step(x, u, std::vector<double>(4, 0.1)));
    CHECK_THROWS(buffered_euler_step(x, u, std::vector<double>{0.1, -0.1, 0.1, 0.1, 0.1}));
}

TEST_CASE("fm_loss") {
    Rng rng(9);
    const Clip target = random_clip(4, rng);
    CHECK(fm_loss(target, target) == 0.0);
    Clip shifted = target;
    for (double& v : shifted.data()) v += 1.0;
    CHECK(fm_loss(shifted, target) == doctest::Approx(1.0));

    const Clip pred = random_clip(4, rng);
    const double half = fm_loss(pred, target, std::vector<bool>{false, false, true, true});
    CHECK(half == doctest::Approx(fm_loss(pred.slice(2, 2), target.slice(2, 2))).epsilon(1e-12));
    CHECK_THROWS(fm_loss(pred, target, std::vector<bool>(4, false)));
}

TEST_CASE("cfg_combine") {
    const Clip c = scalar_clip({3.0});
    const Clip u = scalar_clip({1.0});
    CHECK(cfg_combine(c, u, 1.0) == c);
    CHECK(cfg_combine(c, u, 0.0) == u);
    CHECK(cfg_combine(c, u, 2.0).data()[0] == 5.0);
}

TEST_CASE("Euler with the analytic field lands on the data point") {
    Rng rng(10);
    const Clip x1 = random_clip(2, rng);
    for (int T : {1, 3, 16, 50}) {
        Clip x = random_clip(2, rng);
        for (int i = 0; i < T; ++i) {
            const double t = static_cast<double>(i) / T;
            Clip u = x1;
            for (std::size_t k = 0; k < u.size(); ++k) u.data()[k] = (x1.data()[k] - x.data()[k]) / (1.0 - t);
            x = euler_step(x, u, 1.0 / T);
        }
        CHECK(max_abs_diff(x, x1) < 1e-12);
    }
}
