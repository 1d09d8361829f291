// Runs the synthetic planted-preference benchmark through the pipeline API
// and prints where the artifacts landed.

#include <steerx/config.hpp>
#include <steerx/pipeline.hpp>

#include <iostream>

int main() {
  steerx::RunConfig config;
  config.bench = steerx::BenchSpec{};
  config.out_dir = "bench_out";
  config.cache_dir = "bench_out/cache";
  config.seed = 7;

  steerx::StageResult result = steerx::pipeline::run_all(config);
  std::cout << "artifacts under " << config.out_dir
            << (result.ok() ? "" : " (with failures)") << '\n';
  return result.ok() ? 0 : 1;
}
