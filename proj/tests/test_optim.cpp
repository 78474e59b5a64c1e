#include <doctest.h>

#include <cmath>

#include "lwf/errors.hpp"
#include "lwf/optim.hpp"

using namespace lwf;

namespace {

Tensor param(double value) {
  Tensor t({1}, std::vector<double>{value});
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor& t, double g) {
  t.zero_grad();
  const double d[1] = {g};
  t.accumulate_grad(d);
}

}  // namespace

TEST_SUITE("optim") {

TEST_CASE("sgd momentum hand example") {
  Tensor p = param(1.0);
  std::vector<Tensor*> ps{&p};
  SgdState s{{0.1, 0.9, 0.0}, {}};
  set_grad(p, 0.1);
  sgd_momentum_step(ps, s, FreezeMask::none(1));
  CHECK(std::abs(s.velocity[0][0] - 0.1) <= 1e-15);
  CHECK(std::abs(p[0] - 0.99) <= 1e-15);
  sgd_momentum_step(ps, s, FreezeMask::none(1));
  CHECK(std::abs(s.velocity[0][0] - 0.19) <= 1e-15);
  CHECK(std::abs(p[0] - 0.971) <= 1e-15);
}

TEST_CASE("weight decay alone") {
  Tensor p = param(1.0);
  std::vector<Tensor*> ps{&p};
  SgdState s{{1e-3, 0.0, 4e-5}, {}};
  sgd_momentum_step(ps, s, FreezeMask::none(1));
  CHECK(std::abs(p[0] - (1.0 - 4e-8)) <= 1e-16);
}

TEST_CASE("frozen parameters and their velocity are untouched") {
  Tensor a = param(0.3), b = param(-0.7);
  std::vector<Tensor*> ps{&a, &b};
  SgdState s{{0.1, 0.9, 4e-5}, {}};
  set_grad(a, 0.5);
  set_grad(b, 123.0);
  const FreezeMask mask = FreezeMask::from_group(ps, std::vector<Tensor*>{&b});
  CHECK(mask.frozen == std::vector<bool>{false, true});
  for (int i = 0; i < 5; ++i) sgd_momentum_step(ps, s, mask);
  CHECK(b[0] == -0.7);
  CHECK(s.velocity[1][0] == 0.0);
  CHECK(a[0] != 0.3);

  AdamState as{{}, {}, {}, {}};
  for (int i = 0; i < 5; ++i) adam_step(ps, as, mask);
  CHECK(b[0] == -0.7);
  CHECK(as.m[1][0] == 0.0);
  CHECK(as.steps[1] == 0);

  CHECK_THROWS_AS(sgd_momentum_step(ps, s, FreezeMask::none(1)), ContractError);
}

TEST_CASE("sgd with no momentum and no decay is gradient descent") {
  Tensor p({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  std::vector<Tensor*> ps{&p};
  SgdState s{{0.05, 0.0, 0.0}, {}};
  for (int step = 0; step < 10; ++step) {
    const Tensor before = p;
    p.zero_grad();
    const std::vector<double> g{2 * p[0], 2 * p[1], 2 * p[2]};
    p.accumulate_grad(g);
    sgd_momentum_step(ps, s, FreezeMask::none(1));
    for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == before[i] - 0.05 * g[i]);
  }
}

TEST_CASE("sgd config validation") {
  Tensor p = param(1.0);
  std::vector<Tensor*> ps{&p};
  SgdState s{{0.1, 1.0, 0.0}, {}};
  CHECK_THROWS_AS(sgd_momentum_step(ps, s, FreezeMask::none(1)), ConfigError);
  CHECK_THROWS_AS((SgdConfig{0.0, 0.9, 0.0}.validate()), ConfigError);
  CHECK_THROWS_AS((SgdConfig{0.1, 0.9, -1.0}.validate()), ConfigError);
}

TEST_CASE("sgd momentum descends a 1-D quadratic monotonically") {
  Tensor p = param(3.0);
  std::vector<Tensor*> ps{&p};
  SgdState s{SgdConfig{}, {}};
  auto f = [&] { return 0.5 * p[0] * p[0]; };
  double prev = f();
  for (int step = 0; step < 2000; ++step) {
    set_grad(p, p[0]);
    sgd_momentum_step(ps, s, FreezeMask::none(1));
    if (step >= 5) CHECK(f() < prev);
    prev = f();
  }
  CHECK(f() < 0.5 * 9.0 * 1e-3);
}

TEST_CASE("adam first step is lr * sign(g)") {
  for (double g : {0.3, -5.0, 1e-3}) {
    Tensor p = param(1.0);
    std::vector<Tensor*> ps{&p};
    AdamState s{{}, {}, {}, {}};
    set_grad(p, g);
    adam_step(ps, s, FreezeMask::none(1));
    CHECK(std::abs((1.0 - p[0]) - 1e-3 * (g > 0 ? 1 : -1)) <= 1e-3 * 1e-4);
  }
}

TEST_CASE("adam matches a scalar oracle over 100 steps") {
  Tensor p = param(2.5);
  std::vector<Tensor*> ps{&p};
  AdamState s{{0.05, 0.9, 0.999, 1e-8, 0.0}, {}, {}, {}};
  double x = 2.5, m = 0, v = 0;
  for (int t = 1; t <= 100; ++t) {
    set_grad(p, 3.0 * p[0]);
    adam_step(ps, s, FreezeMask::none(1));
    const double g = 3.0 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    x -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(std::abs(p[0] - x) <= 1e-10);
  }
}

TEST_CASE("schedules") {
  const Schedule paper = make_schedule();
  REQUIRE(paper.phases.size() == 2);
  CHECK(paper.phases[0] == Phase{"warm-up", 1e-3, 40});
  CHECK(paper.phases[1] == Phase{"joint", 1e-4, 60});
  CHECK(paper.total_epochs() == 100);
  CHECK(make_schedule(SchedulePreset::Paper) == paper);
  const Schedule desk = make_schedule(SchedulePreset::Desk);
  CHECK(desk.phases[0] == Phase{"warm-up", 1e-3, 10});
  CHECK(desk.phases[1] == Phase{"joint", 1e-4, 20});

  ScheduleOverrides o;
  o.joint_epochs = 7;
  o.warmup_lr = 0.02;
  const Schedule custom = make_schedule(o);
  CHECK(custom.warmup().lr == 0.02);
  CHECK(custom.joint().epochs == 7);
  o.warmup_epochs = 0;
  CHECK_THROWS_AS(make_schedule(o), ConfigError);
  Schedule neg = desk;
  neg.phases[1].lr = -1;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
}

}  // TEST_SUITE
