#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lcpr/ops.hpp"
#include "lcpr/rng.hpp"

namespace lcpr::nd {

struct FdReport {
  std::string name;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double analytic = 0.0, numeric = 0.0;
  bool pass = false;
};

// Builds a scalar loss from a leaf input on a fresh tape.
using GraphFn = std::function<Val(Tape<double>&, Val)>;

// Central finite differences against reverse-mode gradients, 64-bit.
// Relative error uses max(|a|,|b|,scale_floor) as denominator so components
// with near-zero gradient are compared absolutely.
inline FdReport finite_diff_check(const std::string& name, const GraphFn& graph,
                                  const Tensor<double>& input, double tolerance,
                                  double step = 1e-5, double scale_floor = 1.0) {
  FdReport rep;
  rep.name = name;

  Tape<double> tape;
  Val x = tape.leaf(input);
  Val loss = graph(tape, x);
  auto grads = tape.backward(loss);
  if (!grads[static_cast<size_t>(x.id)])
    throw DataError("finite_diff_check: loss does not reach the input");
  Tensor<double> analytic = *grads[static_cast<size_t>(x.id)];

  auto eval = [&](const Tensor<double>& in) {
    Tape<double> t2;
    t2.grad_enabled = false;
    Val v = t2.leaf(in);
    Val l = graph(t2, v);
    return t2.val(l).data[0];
  };

  Tensor<double> probe = input;
  for (int64_t i = 0; i < input.size(); ++i) {
    double keep = probe.data[static_cast<size_t>(i)];
    probe.data[static_cast<size_t>(i)] = keep + step;
    double up = eval(probe);
    probe.data[static_cast<size_t>(i)] = keep - step;
    double dn = eval(probe);
    probe.data[static_cast<size_t>(i)] = keep;
    double fd = (up - dn) / (2.0 * step);
    double an = analytic.data[static_cast<size_t>(i)];
    double denom = std::max({std::abs(fd), std::abs(an), scale_floor});
    double rel = std::abs(fd - an) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.analytic = an;
      rep.numeric = fd;
    }
  }
  rep.pass = rep.max_rel_err <= tolerance;
  return rep;
}

// FD suite over every registered primitive; the gradcheck CLI subcommand and
// the acceptance suite both run this.
inline std::vector<FdReport> check_all_primitives(uint64_t seed = 17, double tol = 1e-4) {
  Rng rng(seed);
  // Inputs are drawn away from relu/maxpool kinks: components get a margin
  // of at least ~1e-3, far above the 1e-5 probe step.
  auto rand_tensor = [&](Shape s) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.data) {
      v = rng.gaussian();
      if (std::abs(v) < 2e-3) v = v < 0 ? v - 2e-3 : v + 2e-3;
    }
    return t;
  };

  std::vector<FdReport> reports;
  auto run = [&](const std::string& name, const GraphFn& fn, const Tensor<double>& in) {
    reports.push_back(finite_diff_check(name, fn, in, tol));
  };

  run("relu", [](Tape<double>& t, Val x) { return sum_all(t, relu(t, x)); }, rand_tensor({3, 7}));
  run("sigmoid", [](Tape<double>& t, Val x) { return sum_all(t, sigmoid(t, x)); },
      rand_tensor({4, 5}));
  run("softmax",
      [](Tape<double>& t, Val x) {
        Val y = softmax_lastdim(t, x);
        Val w = t.constant(Tensor<double>({3, 6}, std::vector<double>{
                                                      0.3, -0.7, 1.1, 0.2, -0.4, 0.9,
                                                      -1.2, 0.5, 0.8, -0.1, 0.6, -0.9,
                                                      0.4, 0.4, -0.6, 1.3, -0.2, 0.1}));
        return sum_all(t, mul(t, y, w));
      },
      rand_tensor({3, 6}));
  run("linear",
      [](Tape<double>& t, Val x) {
        Rng r(5);
        Tensor<double> w({4, 6}), b({4});
        for (auto& v : w.data) v = r.gaussian();
        for (auto& v : b.data) v = r.gaussian();
        Val y = linear(t, x, t.leaf(w), t.leaf(b));
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({3, 6}));
  run("conv2d_circular",
      [](Tape<double>& t, Val x) {
        Rng r(7);
        Tensor<double> w({3, 2, 3, 3});
        for (auto& v : w.data) v = r.gaussian();
        Val y = conv2d(t, x, t.leaf(w), Val{}, 1, 1, PadMode::kCircularWidth);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 2, 4, 6}));
  run("conv2d_strided_zero",
      [](Tape<double>& t, Val x) {
        Rng r(9);
        Tensor<double> w({2, 2, 3, 3}), b({2});
        for (auto& v : w.data) v = r.gaussian();
        for (auto& v : b.data) v = r.gaussian();
        Val y = conv2d(t, x, t.leaf(w), t.leaf(b), 2, 2, PadMode::kZeroBoth);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({1, 2, 5, 6}));
  run("conv1d_circular",
      [](Tape<double>& t, Val x) {
        Rng r(11);
        Tensor<double> w({3, 2, 3});
        for (auto& v : w.data) v = r.gaussian();
        Val y = conv1d(t, x, t.leaf(w), Val{});
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 2, 8}));
  run("maxpool2d",
      [](Tape<double>& t, Val x) {
        Val y = maxpool2d(t, x, 3, 2, 2, PadMode::kCircularWidth);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 2, 4, 8}));
  run("vertical_maxpool",
      [](Tape<double>& t, Val x) {
        Val y = vertical_maxpool(t, x);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 3, 5, 4}));
  run("batchnorm_train",
      [](Tape<double>& t, Val x) {
        Tensor<double> rm({3}), rv = Tensor<double>::full({3}, 1.0);
        Rng r(13);
        Tensor<double> gm({3}), bt({3});
        for (auto& v : gm.data) v = 1.0 + 0.1 * r.gaussian();
        for (auto& v : bt.data) v = 0.1 * r.gaussian();
        Val y = batchnorm(t, x, t.leaf(gm), t.leaf(bt), &rm, &rv, true);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 3, 4, 5}));
  run("batchnorm_eval",
      [](Tape<double>& t, Val x) {
        Tensor<double> rm = Tensor<double>::full({3}, 0.2);
        Tensor<double> rv = Tensor<double>::full({3}, 1.5);
        Val y = batchnorm(t, x, t.leaf(Tensor<double>::full({3}, 1.1)),
                          t.leaf(Tensor<double>::full({3}, -0.2)), &rm, &rv, false);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 3, 4, 5}));
  run("bmm",
      [](Tape<double>& t, Val x) {
        Rng r(15);
        Tensor<double> b({2, 5, 3});
        for (auto& v : b.data) v = r.gaussian();
        Val y = bmm(t, x, t.leaf(b), false, false);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 4, 5}));
  run("bmm_transb",
      [](Tape<double>& t, Val x) {
        Rng r(16);
        Tensor<double> b({2, 6, 5});
        for (auto& v : b.data) v = r.gaussian();
        Val y = bmm(t, x, t.leaf(b), false, true);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 4, 5}));
  run("l2_normalize",
      [](Tape<double>& t, Val x) {
        Val y = l2_normalize_lastdim(t, x);
        Val w = t.constant(Tensor<double>({2, 5}, std::vector<double>{
                                                      0.3, -0.7, 1.1, 0.2, -0.4,
                                                      -1.2, 0.5, 0.8, -0.1, 0.6}));
        return sum_all(t, mul(t, y, w));
      },
      rand_tensor({2, 5}));
  run("broadcast_height",
      [](Tape<double>& t, Val x) {
        Val y = broadcast_height(t, x, 3);
        return sum_all(t, mul(t, y, y));
      },
      rand_tensor({2, 3, 4}));
  run("sqrt", [](Tape<double>& t, Val x) {
        Val y = sqrt_op(t, add_scalar(t, mul(t, x, x), 0.5));
        return sum_all(t, y);
      },
      rand_tensor({3, 4}));
  run("permute_concat_slice",
      [](Tape<double>& t, Val x) {
        Val p = permute(t, x, {0, 2, 1});
        Val c = concat_lastdim(t, {p, p});
        Val s = slice_lastdim(t, c, 1, 3);
        return sum_all(t, mul(t, s, s));
      },
      rand_tensor({2, 3, 4}));
  return reports;
}

}  // namespace lcpr::nd
