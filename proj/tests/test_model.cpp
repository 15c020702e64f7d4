#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "mrn/model.hpp"
#include "support/oracles.hpp"

using namespace mrn;

namespace {

Tensor random_input(int64_t n, int64_t c, int64_t h, int64_t w, uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto vals = oracles::random_values(static_cast<size_t>(n * c * h * w), rng);
  return Tensor({n, c, h, w}, std::move(vals));
}

bool bits_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("depth bookkeeping follows 6n+2 / 9n+2") {
  NetworkConfig basic = NetworkConfig::from_depth(110, 1, 1, BlockKind::Basic);
  CHECK(basic.stage_blocks == std::array<int, 3>{18, 18, 18});
  CHECK(basic.depth() == 110);
  CHECK(basic.total_blocks() == 54);

  NetworkConfig smallest = NetworkConfig::from_depth(8, 1, 1, BlockKind::Basic);
  CHECK(smallest.stage_blocks == std::array<int, 3>{1, 1, 1});
  CHECK(smallest.depth() == 8);

  NetworkConfig bottle = NetworkConfig::from_depth(164, 1, 1, BlockKind::Bottleneck);
  CHECK(bottle.stage_blocks == std::array<int, 3>{18, 18, 18});
  CHECK(bottle.depth() == 164);

  CHECK_THROWS_AS(NetworkConfig::from_depth(9, 1, 1, BlockKind::Basic), std::invalid_argument);
  CHECK_THROWS_AS(NetworkConfig::from_depth(110, 0, 1, BlockKind::Basic), std::invalid_argument);
}

TEST_CASE("parameter counts match the published sizes") {
  auto count = [](int depth, int k, BlockKind kind) {
    return count_parameters(build_network(NetworkConfig::from_depth(depth, k, 1, kind), 1));
  };
  // frozen exact counts for this architecture family
  CHECK(count(110, 1, BlockKind::Basic) == 1730522);
  CHECK(count(8, 4, BlockKind::Basic) == 300090);
  // published round/truncated figures near 1.7M
  CHECK(count(110, 1, BlockKind::Basic) == doctest::Approx(1.7e6).epsilon(0.05));
  CHECK(count(8, 23, BlockKind::Basic) == doctest::Approx(1.7e6).epsilon(0.05));
  CHECK(count(14, 10, BlockKind::Basic) == doctest::Approx(1.7e6).epsilon(0.05));
  CHECK(count(164, 1, BlockKind::Bottleneck) == doctest::Approx(1.7e6).epsilon(0.05));
}

TEST_CASE("doubling k exactly doubles the residual-branch parameters") {
  NetworkConfig c1 = NetworkConfig::from_depth(14, 1, 1, BlockKind::Basic);
  NetworkConfig c2 = NetworkConfig::from_depth(14, 2, 1, BlockKind::Basic);
  ParamBreakdown b1 = count_parameters_detail(build_network(c1, 3));
  ParamBreakdown b2 = count_parameters_detail(build_network(c2, 3));
  CHECK(b2.branch == 2 * b1.branch);
  CHECK(b2.shared == b1.shared);
}

TEST_CASE("forward output shape is [N, num_classes]") {
  for (BlockKind kind : {BlockKind::Basic, BlockKind::Bottleneck}) {
    NetworkConfig cfg = NetworkConfig::from_depth(kind == BlockKind::Basic ? 8 : 11, 2, 1, kind,
                                                  7, {3, 16, 16});
    Network net = build_network(cfg, 5);
    Tensor x = random_input(2, 3, 16, 16, 9);
    Tensor y = net.forward(x, Mode::Eval);
    CHECK(y.shape() == Shape{2, 7});
    for (double v : y.values()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("He initialization has variance close to 2/fan_in") {
  Network net = build_network(NetworkConfig::from_depth(20, 1, 1, BlockKind::Basic), 11);
  // stage-3 3x3 conv: fan_in 64*9, tens of thousands of draws
  const Block& block = net.blocks.back();
  const auto& conv = std::get<ConvLayer>(block.functions[0].steps[5]);
  double s = 0.0, sq = 0.0;
  for (double v : conv.weight.values()) {
    s += v;
    sq += v * v;
  }
  const double n = static_cast<double>(conv.weight.numel());
  const double var = sq / n - (s / n) * (s / n);
  const double expected = 2.0 / (64.0 * 9.0);
  CHECK(var == doctest::Approx(expected).epsilon(0.10));
}

TEST_CASE("all-false mask reduces a block to the identity, including gradients") {
  NetworkConfig cfg = NetworkConfig::from_depth(8, 2, 1, BlockKind::Basic, 10, {3, 8, 8});
  Network net = build_network(cfg, 13);
  Tensor x = random_input(2, 16, 8, 8, 17);
  x.set_requires_grad(true);
  BlockRoute route;
  route.include_skip = true;
  route.function_mask = {false, false};

  Tape tape;
  Tensor y;
  {
    TapeScope scope(tape);
    y = net.block_forward(0, x, Mode::Eval, &route);
    backward(tape, sum(y));
  }
  CHECK(bits_equal(y.values(), x.values()));
  for (double g : x.grad()) CHECK(g == 1.0);  // d(out)/d(in) is the identity
}

TEST_CASE("two functions with identical weights double the residual term") {
  NetworkConfig cfg = NetworkConfig::from_depth(8, 2, 1, BlockKind::Basic, 10, {3, 8, 8});
  Network net = build_network(cfg, 19);
  Block& block = net.blocks[0];
  // copy f0 into f1
  for (size_t s = 0; s < block.functions[0].steps.size(); ++s) {
    if (auto* conv = std::get_if<ConvLayer>(&block.functions[0].steps[s])) {
      std::get<ConvLayer>(block.functions[1].steps[s]).weight = conv->weight;
    } else if (auto* norm = std::get_if<NormLayer>(&block.functions[0].steps[s])) {
      auto& other = std::get<NormLayer>(block.functions[1].steps[s]);
      other.gamma = norm->gamma;
      other.beta = norm->beta;
    }
  }
  Tensor x = random_input(2, 16, 8, 8, 23);
  Tensor both = net.block_forward(0, x, Mode::Eval);

  BlockRoute only_first;
  only_first.include_skip = false;
  only_first.function_mask = {true, false};
  Tensor f_out = net.block_forward(0, x, Mode::Eval, &only_first);
  Tensor expected = add(add(x, f_out), f_out);  // x + 2 f(x), summed in block order
  CHECK(bits_equal(both.values(), expected.values()));
}

TEST_CASE("linearized 3-block 2-function net expands into exactly 27 path terms") {
  Network net = build_linear_chain_network(3, 2, 0.5, 1, 1, 1, 29);
  net.fc_weight = Tensor({1, 1}, {1.0});
  net.fc_bias = Tensor::zeros({1});
  // give every function its own multiplier
  std::vector<std::vector<double>> factors(3);
  for (int b = 0; b < 3; ++b) {
    for (int f = 0; f < 2; ++f) {
      const double a = 0.1 * (b + 1) + 0.03 * (f + 1);
      factors[static_cast<size_t>(b)].push_back(a);
      auto& conv = std::get<ConvLayer>(net.blocks[static_cast<size_t>(b)]
                                           .functions[static_cast<size_t>(f)].steps[0]);
      conv.weight.mutable_values()[0] = a;
    }
  }

  // brute-force distributed expansion: every block picks skip or one function
  int terms = 0;
  double expansion = 0.0;
  for (int c0 = 0; c0 <= 2; ++c0) {
    for (int c1 = 0; c1 <= 2; ++c1) {
      for (int c2 = 0; c2 <= 2; ++c2) {
        const int choice[3] = {c0, c1, c2};
        double prod = 1.0;
        for (int b = 0; b < 3; ++b) {
          if (choice[b] > 0) prod *= factors[static_cast<size_t>(b)][static_cast<size_t>(choice[b] - 1)];
        }
        expansion += prod;
        ++terms;
      }
    }
  }
  CHECK(terms == 27);  // (k+1)^n

  Tensor x({1, 1, 1, 1}, {1.0});
  Tensor y = net.forward(x, Mode::Eval);
  CHECK(y.scalar_value() == doctest::Approx(expansion).epsilon(1e-12));
}

TEST_CASE("k=1 network forward equals a hand-written plain pre-activation net") {
  NetworkConfig cfg = NetworkConfig::from_depth(14, 1, 1, BlockKind::Basic, 10, {3, 16, 16});
  Network net = build_network(cfg, 31);
  Tensor x = random_input(2, 3, 16, 16, 37);

  // independent composition straight from the definition
  auto apply_norm = [&](const NormLayer& nl, const Tensor& t) {
    RunningStats stats = nl.stats;
    return batch_norm(t, nl.gamma, nl.beta, stats, Mode::Eval, cfg.bn_eps, cfg.bn_momentum);
  };
  Tensor cur = conv2d(x, net.stem.weight, net.stem.stride, net.stem.pad);
  for (Block& block : net.blocks) {
    const auto& f = block.functions[0];
    Tensor h = apply_norm(std::get<NormLayer>(f.steps[0]), cur);
    h = relu(h);
    const auto& conv1 = std::get<ConvLayer>(f.steps[2]);
    h = conv2d(h, conv1.weight, conv1.stride, conv1.pad);
    h = apply_norm(std::get<NormLayer>(f.steps[3]), h);
    h = relu(h);
    const auto& conv2 = std::get<ConvLayer>(f.steps[5]);
    h = conv2d(h, conv2.weight, conv2.stride, conv2.pad);
    Tensor skip = block.projection
                      ? conv2d(cur, block.projection->weight, block.projection->stride,
                               block.projection->pad)
                      : cur;
    cur = add(skip, h);
  }
  cur = apply_norm(*net.head_norm, cur);
  cur = relu(cur);
  cur = global_avg_pool(cur);
  Tensor expected = linear(cur, net.fc_weight, net.fc_bias);

  Tensor actual = net.forward(x, Mode::Eval);
  CHECK(bits_equal(actual.values(), expected.values()));
}

TEST_CASE("drop_block is reversible and rejects downsampling blocks") {
  NetworkConfig cfg = NetworkConfig::from_depth(14, 2, 1, BlockKind::Basic, 10, {3, 16, 16});
  Network net = build_network(cfg, 41);
  Tensor x = random_input(2, 3, 16, 16, 43);
  Tensor baseline = net.forward(x, Mode::Eval);

  const std::vector<int> lesionable = net.lesionable_blocks();
  CHECK(lesionable == std::vector<int>{0, 1, 3, 5});  // blocks 2 and 4 downsample

  Network dropped = drop_block(net, 1);
  Tensor lesioned_out = dropped.forward(x, Mode::Eval);
  CHECK(lesioned_out.shape() == baseline.shape());
  for (double v : lesioned_out.values()) CHECK(std::isfinite(v));

  // restoring reproduces the original bit for bit
  dropped.blocks[1].active = true;
  Tensor restored = dropped.forward(x, Mode::Eval);
  CHECK(bits_equal(restored.values(), baseline.values()));

  CHECK_THROWS_AS(drop_block(net, 2), std::invalid_argument);
  CHECK_THROWS_AS(drop_block(net, 99), std::invalid_argument);
}

TEST_CASE("sample_configuration endpoints and Bernoulli statistics") {
  NetworkConfig cfg = NetworkConfig::from_depth(20, 1, 1, BlockKind::Basic, 10, {3, 8, 8});
  Network net = build_network(cfg, 47);
  std::mt19937_64 rng(53);

  Routes all_on = sample_configuration(net, 1.0, rng);
  Routes all_off = sample_configuration(net, 0.0, rng);
  for (const BlockRoute& r : all_on) {
    for (bool m : r.function_mask) CHECK(m);
  }
  for (const BlockRoute& r : all_off) {
    for (bool m : r.function_mask) CHECK_FALSE(m);
  }

  // mean active blocks over 10k draws vs Binomial(9, 0.5), 3 sigma
  const int draws = 10000;
  const int n_blocks = net.config.total_blocks();
  int64_t active = 0;
  for (int i = 0; i < draws; ++i) {
    Routes r = sample_configuration(net, 0.5, rng);
    for (const BlockRoute& br : r) {
      if (br.function_mask[0]) ++active;
    }
  }
  const double mean = static_cast<double>(active) / draws;
  const double sigma = std::sqrt(n_blocks * 0.25 / draws);
  CHECK(std::fabs(mean - n_blocks / 2.0) < 3.0 * sigma);

  // determinism under a fixed seed
  std::mt19937_64 a(71), b(71);
  Routes ra = sample_configuration(net, 0.3, a);
  Routes rb = sample_configuration(net, 0.3, b);
  for (size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].function_mask == rb[i].function_mask);
}

TEST_CASE("with p=0 the network reduces to stem, projections and head") {
  NetworkConfig cfg = NetworkConfig::from_depth(14, 2, 1, BlockKind::Basic, 10, {3, 16, 16});
  Network net = build_network(cfg, 59);
  std::mt19937_64 rng(61);
  Routes off = sample_configuration(net, 0.0, rng);
  Tensor x = random_input(1, 3, 16, 16, 67);
  Tensor reduced = net.forward(x, Mode::Eval, &off);

  Tensor cur = conv2d(x, net.stem.weight, net.stem.stride, net.stem.pad);
  for (Block& block : net.blocks) {
    if (block.projection) {
      cur = conv2d(cur, block.projection->weight, block.projection->stride, block.projection->pad);
    }
  }
  RunningStats stats = net.head_norm->stats;
  cur = batch_norm(cur, net.head_norm->gamma, net.head_norm->beta, stats, Mode::Eval, cfg.bn_eps,
                   cfg.bn_momentum);
  cur = relu(cur);
  Tensor expected = linear(global_avg_pool(cur), net.fc_weight, net.fc_bias);
  CHECK(bits_equal(reduced.values(), expected.values()));
}

TEST_CASE("zeroed final convolutions make every block an exact identity") {
  NetworkConfig cfg = NetworkConfig::from_depth(8, 3, 1, BlockKind::Basic, 10, {3, 8, 8});
  Network net = build_network(cfg, 73);
  Block& block = net.blocks[0];
  for (ResidualFunction& f : block.functions) {
    auto& last_conv = std::get<ConvLayer>(f.steps.back());
    std::fill(last_conv.weight.mutable_values().begin(), last_conv.weight.mutable_values().end(), 0.0);
  }
  Tensor x = random_input(2, 16, 8, 8, 79);
  Tensor y = net.block_forward(0, x, Mode::Eval);
  CHECK(bits_equal(y.values(), x.values()));  // x + sum of k zero functions == x
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "mrn_ckpt_test";
  fs::create_directories(dir);
  const std::string p1 = (dir / "a.ckpt").string();
  const std::string p2 = (dir / "b.ckpt").string();

  NetworkConfig cfg = NetworkConfig::from_depth(8, 2, 1, BlockKind::Basic, 4, {3, 12, 12});
  Network net = build_network(cfg, 83);
  // make the running stats non-trivial
  net.blocks[0].functions[0];
  std::get<NormLayer>(net.blocks[0].functions[0].steps[0]).stats.mean[3] = 0.125;

  std::map<std::string, std::vector<double>> extra{{"data.mean", {0.5, 0.4, 0.3}}};
  save_checkpoint(net, p1, extra);

  std::map<std::string, std::vector<double>> loaded_extra;
  Network loaded = load_checkpoint(p1, &loaded_extra);
  CHECK(loaded.config.functions_per_block == 2);
  CHECK(loaded.config.num_classes == 4);
  CHECK(loaded_extra.at("data.mean") == std::vector<double>{0.5, 0.4, 0.3});

  bool all_equal = true;
  net.for_each_parameter([&](const std::string& name, Tensor& t, const ParamInfo&) {
    loaded.for_each_parameter([&](const std::string& name2, Tensor& t2, const ParamInfo&) {
      if (name == name2 && !bits_equal(t.values(), t2.values())) all_equal = false;
    });
  });
  CHECK(all_equal);

  save_checkpoint(loaded, p2, loaded_extra);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(bytes1 == bytes2);

  // identical forwards after the round trip
  Tensor x = random_input(1, 3, 12, 12, 89);
  CHECK(bits_equal(net.forward(x, Mode::Eval).values(), loaded.forward(x, Mode::Eval).values()));

  // corrupt magic
  bytes1[0] = 'X';
  const std::string p3 = (dir / "c.ckpt").string();
  std::ofstream(p3, std::ios::binary) << bytes1;
  CHECK_THROWS_AS(load_checkpoint(p3), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("plain (skipless) networks drop the residual sum entirely") {
  NetworkConfig cfg = NetworkConfig::from_depth(14, 1, 1, BlockKind::Basic, 2, {3, 16, 16});
  cfg.skip_connections = false;
  Network net = build_network(cfg, 97);
  CHECK_FALSE(net.blocks[0].has_skip);
  CHECK_FALSE(net.blocks[2].projection.has_value());
  Tensor x = random_input(2, 3, 16, 16, 101);
  Tensor y = net.forward(x, Mode::Eval);
  CHECK(y.shape() == Shape{2, 2});
  // identical config with skips differs
  NetworkConfig cfg2 = cfg;
  cfg2.skip_connections = true;
  Network res = build_network(cfg2, 97);
  Tensor y2 = res.forward(x, Mode::Eval);
  CHECK_FALSE(bits_equal(y.values(), y2.values()));
}
