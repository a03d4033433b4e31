#include "maskfuse/errors.hpp"
#include "maskfuse/rng.hpp"
#include "maskfuse/schedule.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace maskfuse;

TEST_CASE("closed-form schedules") {
    auto e = eval_schedule(Schedule::linear(), 0.25);
    CHECK(e.alpha == doctest::Approx(0.75));
    CHECK(e.dalpha == doctest::Approx(-1.0));

    e = eval_schedule(Schedule::cosine(), 0.5);
    CHECK(e.alpha == doctest::Approx(0.70710678).epsilon(1e-7));

    e = eval_schedule(Schedule::linear(), 0.0);
    CHECK(e.alpha == 1.0);

    for (auto s : {Schedule::linear(), Schedule::cosine(), Schedule::discrete(10)}) {
        CHECK(eval_schedule(s, 0.0).alpha == doctest::Approx(1.0));
        CHECK(eval_schedule(s, 1.0).alpha == doctest::Approx(0.0).epsilon(1e-12));
        CHECK_THROWS_AS(eval_schedule(s, -0.01), DomainError);
        CHECK_THROWS_AS(eval_schedule(s, 1.01), DomainError);
    }
    CHECK_THROWS_AS(Schedule::discrete(1), ConfigError);
    CHECK(parse_schedule("cosine").kind == ScheduleKind::Cosine);
    CHECK_THROWS_AS(parse_schedule("bogus"), ConfigError);
}

TEST_CASE("loss weights") {
    const auto lin = Schedule::linear();
    CHECK(loss_weight(eval_schedule(lin, 0.25), 5.0) == doctest::Approx(4.0));
    CHECK(loss_weight(eval_schedule(lin, 0.1), 5.0) == doctest::Approx(5.0));
    CHECK(loss_weight(eval_schedule(lin, 1.0), 5.0) == doctest::Approx(1.0));
    CHECK(eval_schedule(lin, 0.25).weight == doctest::Approx(4.0));

    // Saturates at the clamp instead of diverging.
    CHECK(loss_weight(eval_schedule(lin, 0.0), 5.0) == 5.0);
    CHECK_THROWS_AS(loss_weight(eval_schedule(lin, 0.0), std::nullopt), DomainError);
    CHECK(loss_weight(eval_schedule(lin, 0.1), std::nullopt) == doctest::Approx(10.0));

    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double t = 1e-3 + (1.0 - 1e-3) * rng.uniform();
        for (auto s : {Schedule::linear(), Schedule::cosine()}) {
            const auto e       = eval_schedule(s, t);
            const double raw   = loss_weight(e, std::nullopt);
            const double clamp = loss_weight(e, 5.0);
            CHECK(clamp <= 5.0);
            if (raw <= 5.0) {
                CHECK(clamp == raw);
            }
        }
    }
}

TEST_CASE("monotone alpha and derivative") {
    Rng rng(11);
    for (int i = 0; i < 1000; ++i) {
        double a = rng.uniform(), b = rng.uniform();
        if (a > b) {
            std::swap(a, b);
        }
        for (auto s : {Schedule::linear(), Schedule::cosine()}) {
            CHECK(s.alpha(a) >= s.alpha(b));
        }
    }
    const double h = 1e-6;
    for (int i = 1; i <= 100; ++i) {
        const double t = i / 101.0;
        for (auto s : {Schedule::linear(), Schedule::cosine()}) {
            const double fd = (s.alpha(t + h) - s.alpha(t - h)) / (2 * h);
            const double d  = eval_schedule(s, t).dalpha;
            CHECK(d <= 0.0);
            CHECK(std::abs(fd - d) <= 1e-6 * std::abs(d));
        }
    }
}

TEST_CASE("discrete schedule") {
    const auto d = Schedule::discrete(10000);
    for (int k = 0; k <= 10000; k += 97) {
        const double t = k / 10000.0;
        CHECK(std::abs(d.alpha(t) - (1.0 - t)) < 1e-4);
    }
    // Off-grid times snap up to the next grid point.
    const auto d4 = Schedule::discrete(4);
    CHECK(d4.alpha(0.3) == doctest::Approx(0.5));
    CHECK(eval_schedule(d4, 0.3).dalpha == doctest::Approx(-1.0));
}
