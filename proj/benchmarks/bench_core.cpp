#include <benchmark/benchmark.h>

#include "alws/rng.hpp"
#include "alws/tape.hpp"

using namespace alws;

static void BM_TapeBackwardMlp(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(7);
  Vec theta = rng.normal_vec(20 * 20 + 20);
  Mat X(20, n);
  for (int i = 0; i < X.size(); ++i) X.data()[i] = rng.normal();
  for (auto _ : state) {
    Tape t;
    Var th = t.param(theta);
    Var W = t.reshape(t.slice(th, 0, 400), 20, 20);
    Var b = t.slice(th, 400, 20);
    Var H = t.vtanh(t.matmul(W, t.constant(X)));
    Var out = t.add(t.vsum(H), t.sqnorm(b));
    Vec g = t.backward(out);
    benchmark::DoNotOptimize(g.data());
  }
}
BENCHMARK(BM_TapeBackwardMlp)->Arg(100)->Arg(1000);

BENCHMARK_MAIN();
