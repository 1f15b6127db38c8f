#include <cmath>
#include <cstring>

#include "doctest.h"
#include "hsalab/backbone.hpp"
#include "hsalab/gradcheck.hpp"

using namespace hsalab;

namespace {

template <typename T>
RecurrentLayerParams<T> random_layer(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  RecurrentLayerParams<T> p;
  p.init(d, rng);
  return p;
}

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("zero candidates keep the residual identity") {
    const std::size_t d = 8, l = 12;
    auto p = random_layer<double>(d, 201);
    p.w_u.set_zero();
    Tensor<double> x({l, d});
    Rng rng(202);
    for (auto& v : x.flat()) v = rng.normal();
    Tensor<double> y, s_final;
    recurrent_forward(p, x, Tensor<double>{}, {}, y, s_final, nullptr);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
    for (std::size_t j = 0; j < d; ++j) CHECK(s_final[j] == 0.0);
  }

  TEST_CASE("a near zero tracks the candidate") {
    const std::size_t d = 4, l = 6;
    auto p = random_layer<double>(d, 203);
    p.w_a.set_zero();
    p.b_a.fill(-40.0);  // decay gate saturates at ~0: no memory
    Tensor<double> x({l, d});
    Rng rng(204);
    for (auto& v : x.flat()) v = rng.normal();
    Tensor<double> y, s_final;
    RecurrentTape<double> tape;
    recurrent_forward(p, x, Tensor<double>{}, {}, y, s_final, &tape);
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t j = 0; j < d; ++j) {
        CHECK(tape.s.at(t, j) == doctest::Approx(tape.u.at(t, j)).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("splitting a sequence with carried state reproduces the unsplit pass") {
    const std::size_t d = 8, l = 32;
    auto p = random_layer<double>(d, 205);
    Tensor<double> x({l, d});
    Rng rng(206);
    for (auto& v : x.flat()) v = rng.normal();

    Tensor<double> y_full, s_full;
    recurrent_forward(p, x, Tensor<double>{}, {}, y_full, s_full, nullptr);

    Tensor<double> x1({l / 2, d}), x2({l / 2, d});
    std::copy(x.data(), x.data() + l / 2 * d, x1.data());
    std::copy(x.data() + l / 2 * d, x.data() + l * d, x2.data());
    Tensor<double> y1, s1, y2, s2;
    recurrent_forward(p, x1, Tensor<double>{}, {}, y1, s1, nullptr);
    recurrent_forward(p, x2, s1, {}, y2, s2, nullptr);

    for (std::size_t i = 0; i < y1.size(); ++i)
      CHECK(y_full[i] == doctest::Approx(y1[i]).epsilon(1e-9));
    for (std::size_t i = 0; i < y2.size(); ++i)
      CHECK(y_full[l / 2 * d + i] == doctest::Approx(y2[i]).epsilon(1e-9));
    for (std::size_t j = 0; j < d; ++j) CHECK(s_full[j] == doctest::Approx(s2[j]).epsilon(1e-9));
  }

  TEST_CASE("state stays bounded by inputs") {
    const std::size_t d = 6, l = 400;
    auto p = random_layer<double>(d, 207);
    Tensor<double> x({l, d});
    Rng rng(208);
    for (auto& v : x.flat()) v = rng.normal();
    RecurrentTape<double> tape;
    Tensor<double> y, s_final;
    recurrent_forward(p, x, Tensor<double>{}, {}, y, s_final, &tape);
    double u_max = 0;
    for (std::size_t i = 0; i < tape.u.size(); ++i) u_max = std::max(u_max, std::fabs(tape.u[i]));
    for (std::size_t i = 0; i < tape.s.size(); ++i) {
      REQUIRE(std::fabs(tape.s[i]) <= u_max + 1e-9);  // convex-combination bound
    }
  }

  TEST_CASE("backward matches finite differences on l=16 d=8") {
    const std::size_t d = 8, l = 16;
    auto p = random_layer<double>(d, 209);
    Rng rng(210);
    Tensor<double> x({l, d});
    for (auto& v : x.flat()) v = rng.normal();
    Tensor<double> s0({d});
    for (auto& v : s0.flat()) v = rng.normal() * 0.3;
    Tensor<double> coeff({l, d});
    for (auto& v : coeff.flat()) v = rng.normal();

    auto f = [&]() -> double {
      Tensor<double> y, s_final;
      recurrent_forward(p, x, s0, {}, y, s_final, nullptr);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * coeff[i];
      return s;
    };

    RecurrentTape<double> tape;
    Tensor<double> y, s_final;
    recurrent_forward(p, x, s0, {}, y, s_final, &tape);
    RecurrentLayerParams<double> grads;
    Rng dummy(0);
    grads.init(d, dummy);
    grads.w_a.set_zero();
    grads.b_a.set_zero();
    grads.w_u.set_zero();
    grads.w_g.set_zero();
    grads.w_o.set_zero();
    Tensor<double> d_x({l, d}), d_s0;
    recurrent_backward(p, tape, coeff, d_x, grads, &d_s0);

    GradCheckOptions opts;
    opts.tol = 1e-5;
    opts.max_entries_per_param = 16;
    const auto report = gradcheck(f,
                                  {{"w_a", &p.w_a, &grads.w_a},
                                   {"b_a", &p.b_a, &grads.b_a},
                                   {"w_u", &p.w_u, &grads.w_u},
                                   {"w_g", &p.w_g, &grads.w_g},
                                   {"w_o", &p.w_o, &grads.w_o},
                                   {"x", &x, &d_x},
                                   {"s0", &s0, &d_s0}},
                                  opts);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-5);
  }

  TEST_CASE("zero upstream gradient zeroes all gradients") {
    const std::size_t d = 4, l = 8;
    auto p = random_layer<double>(d, 211);
    Rng rng(212);
    Tensor<double> x({l, d});
    for (auto& v : x.flat()) v = rng.normal();
    RecurrentTape<double> tape;
    Tensor<double> y, s_final;
    recurrent_forward(p, x, Tensor<double>{}, {}, y, s_final, &tape);
    RecurrentLayerParams<double> grads;
    Rng dummy(0);
    grads.init(d, dummy);
    for (Tensor<double>* t : {&grads.w_a, &grads.b_a, &grads.w_u, &grads.w_g, &grads.w_o})
      t->set_zero();
    Tensor<double> d_y({l, d}), d_x({l, d}), d_s0;
    recurrent_backward(p, tape, d_y, d_x, grads, &d_s0);
    for (std::size_t i = 0; i < d_x.size(); ++i) CHECK(d_x[i] == 0.0);
    for (std::size_t j = 0; j < d; ++j) CHECK(d_s0[j] == 0.0);
    for (std::size_t i = 0; i < grads.w_a.size(); ++i) CHECK(grads.w_a[i] == 0.0);
  }

  TEST_CASE("gradient does not cross an injected boundary") {
    const std::size_t d = 4, l = 16, boundary = 8;
    auto p = random_layer<double>(d, 213);
    Rng rng(214);
    Tensor<double> x({l, d});
    for (auto& v : x.flat()) v = rng.normal();
    StateInjections<double> inj;
    inj.emplace_back(boundary, Tensor<double>{});  // zeros injected at t=8

    RecurrentTape<double> tape;
    Tensor<double> y, s_final;
    recurrent_forward(p, x, Tensor<double>{}, inj, y, s_final, &tape);

    // Upstream gradient only on the second segment.
    Tensor<double> d_y({l, d});
    for (std::size_t t = boundary; t < l; ++t)
      for (std::size_t j = 0; j < d; ++j) d_y.at(t, j) = 1.0;
    RecurrentLayerParams<double> grads;
    Rng dummy(0);
    grads.init(d, dummy);
    for (Tensor<double>* t : {&grads.w_a, &grads.b_a, &grads.w_u, &grads.w_g, &grads.w_o})
      t->set_zero();
    Tensor<double> d_x({l, d}), d_s0;
    recurrent_backward(p, tape, d_y, d_x, grads, &d_s0);
    for (std::size_t t = 0; t < boundary; ++t)
      for (std::size_t j = 0; j < d; ++j) REQUIRE(d_x.at(t, j) == 0.0);
    for (std::size_t j = 0; j < d; ++j) CHECK(d_s0[j] == 0.0);
  }

  TEST_CASE("injection replaces the scan state") {
    const std::size_t d = 4, l = 8, boundary = 4;
    auto p = random_layer<double>(d, 215);
    Rng rng(216);
    Tensor<double> x({l, d});
    for (auto& v : x.flat()) v = rng.normal();

    // Run with an injected state at the boundary; the second half must equal
    // a fresh run over the second half starting from that state.
    Tensor<double> injected({d});
    for (auto& v : injected.flat()) v = rng.normal() * 0.5;
    StateInjections<double> inj;
    inj.emplace_back(boundary, injected);
    Tensor<double> y, s_final;
    recurrent_forward(p, x, Tensor<double>{}, inj, y, s_final, nullptr);

    Tensor<double> x2({l - boundary, d});
    std::copy(x.data() + boundary * d, x.data() + l * d, x2.data());
    Tensor<double> y2, s2;
    recurrent_forward(p, x2, injected, {}, y2, s2, nullptr);
    for (std::size_t i = 0; i < y2.size(); ++i) CHECK(y.at(boundary + i / d, i % d) == y2[i]);
  }

  TEST_CASE("reset schedules") {
    const std::size_t d = 4, L = 2;

    auto snapshot = [&](double fill) {
      StateSnapshot<double> s;
      s.layers.resize(L);
      for (auto& t : s.layers) {
        t.resize({d});
        t.fill(fill);
      }
      return s;
    };

    SUBCASE("zero_reset over one segment is plain training") {
      ResetScheduler<double> sched(ResetMode::zero_reset, 32, 7);
      const auto plan = sched.plan(0, 0, 32, StateSnapshot<double>{});
      CHECK(plan.first.empty());
      CHECK(plan.replacements.empty());
    }

    SUBCASE("bptt carries the previous final state") {
      ResetScheduler<double> sched(ResetMode::bptt_carry, 16, 7);
      const auto carried = snapshot(0.25);
      const auto plan = sched.plan(3, 0, 32, carried);
      CHECK(plan.seg_len == 0);
      REQUIRE(!plan.first.empty());
      CHECK(plan.first.layers[0][0] == 0.25);
    }

    SUBCASE("random_carry at step 0 falls back to zeros") {
      ResetScheduler<double> sched(ResetMode::random_carry, 16, 7);
      const auto plan = sched.plan(0, 0, 32, StateSnapshot<double>{});
      CHECK(plan.first.empty());
      CHECK(plan.replacements.size() == 1);
      CHECK(plan.replacements[0].empty());
    }

    SUBCASE("random_carry with a single stored segment equals bptt_carry") {
      ResetScheduler<double> sched(ResetMode::random_carry, 32, 7);
      sched.record_segment_final(snapshot(0.5));
      sched.end_step();
      const auto plan = sched.plan(1, 0, 32, snapshot(0.5));
      REQUIRE(!plan.first.empty());
      CHECK(plan.first.layers[0][0] == 0.5);
      CHECK(plan.first.layers[1][3] == 0.5);

      ResetScheduler<double> bptt(ResetMode::bptt_carry, 32, 7);
      const auto plan_bptt = bptt.plan(1, 0, 32, snapshot(0.5));
      CHECK(plan_bptt.first.layers[0][0] == 0.5);
    }

    SUBCASE("draws are keyed on step, lane and boundary") {
      ResetScheduler<double> sched(ResetMode::random_carry, 8, 7);
      for (int i = 0; i < 8; ++i) sched.record_segment_final(snapshot(0.125 * i));
      sched.end_step();
      const auto p1 = sched.plan(5, 2, 32, StateSnapshot<double>{});
      const auto p2 = sched.plan(5, 2, 32, StateSnapshot<double>{});
      REQUIRE(!p1.first.empty());
      CHECK(p1.first.layers[0][0] == p2.first.layers[0][0]);  // deterministic
    }
  }
}
