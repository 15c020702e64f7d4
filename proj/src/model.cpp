#include "mrn/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mrn {

namespace {

Tensor he_normal(Shape shape, int64_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = dist(rng);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

ConvLayer make_conv(int in_c, int out_c, int ksize, int stride, int pad, std::mt19937_64& rng) {
  ConvLayer c;
  c.weight = he_normal({out_c, in_c, ksize, ksize}, static_cast<int64_t>(in_c) * ksize * ksize, rng);
  c.stride = stride;
  c.pad = pad;
  return c;
}

NormLayer make_norm(int channels) {
  NormLayer n;
  n.gamma = Tensor::full({channels}, 1.0);
  n.gamma.set_requires_grad(true);
  n.beta = Tensor::zeros({channels});
  n.beta.set_requires_grad(true);
  n.stats = make_running_stats(channels);
  return n;
}

ResidualFunction make_basic_function(int in_c, int out_c, int stride, std::mt19937_64& rng) {
  ResidualFunction f;
  f.steps.emplace_back(make_norm(in_c));
  f.steps.emplace_back(ReluLayer{});
  f.steps.emplace_back(make_conv(in_c, out_c, 3, stride, 1, rng));
  f.steps.emplace_back(make_norm(out_c));
  f.steps.emplace_back(ReluLayer{});
  f.steps.emplace_back(make_conv(out_c, out_c, 3, 1, 1, rng));
  return f;
}

ResidualFunction make_bottleneck_function(int in_c, int mid_c, int out_c, int stride,
                                          std::mt19937_64& rng) {
  ResidualFunction f;
  f.steps.emplace_back(make_norm(in_c));
  f.steps.emplace_back(ReluLayer{});
  f.steps.emplace_back(make_conv(in_c, mid_c, 1, 1, 0, rng));
  f.steps.emplace_back(make_norm(mid_c));
  f.steps.emplace_back(ReluLayer{});
  f.steps.emplace_back(make_conv(mid_c, mid_c, 3, stride, 1, rng));
  f.steps.emplace_back(make_norm(mid_c));
  f.steps.emplace_back(ReluLayer{});
  f.steps.emplace_back(make_conv(mid_c, out_c, 1, 1, 0, rng));
  return f;
}

Tensor apply_function(ResidualFunction& fn, const Tensor& x, Mode mode, double eps,
                      double momentum) {
  Tensor cur = x;
  for (LayerStep& step : fn.steps) {
    if (auto* conv = std::get_if<ConvLayer>(&step)) {
      cur = conv2d(cur, conv->weight, conv->stride, conv->pad);
    } else if (auto* norm = std::get_if<NormLayer>(&step)) {
      cur = batch_norm(cur, norm->gamma, norm->beta, norm->stats, mode, eps, momentum);
    } else {
      cur = relu(cur);
    }
  }
  return cur;
}

}  // namespace

NetworkConfig NetworkConfig::from_depth(int depth, int k, int w, BlockKind kind, int num_classes,
                                        std::array<int, 3> input_shape) {
  const int per_block = kind == BlockKind::Basic ? 6 : 9;
  if (depth <= 2 || (depth - 2) % per_block != 0) {
    throw std::invalid_argument("depth " + std::to_string(depth) + " must be of the form " +
                                std::to_string(per_block) + "n+2 for " +
                                (kind == BlockKind::Basic ? std::string("basic") : std::string("bottleneck")) +
                                " blocks");
  }
  if (k < 1) throw std::invalid_argument("functions per block must be >= 1, got " + std::to_string(k));
  if (w < 1) throw std::invalid_argument("widening factor must be >= 1, got " + std::to_string(w));
  NetworkConfig cfg;
  cfg.kind = kind;
  const int n = (depth - 2) / per_block;
  cfg.stage_blocks = {n, n, n};
  cfg.functions_per_block = k;
  cfg.widen = w;
  cfg.num_classes = num_classes;
  cfg.input_shape = input_shape;
  return cfg;
}

Network build_network(const NetworkConfig& config, uint64_t seed) {
  if (config.functions_per_block < 1) throw std::invalid_argument("functions_per_block must be >= 1");
  for (int n : config.stage_blocks) {
    if (n < 0) throw std::invalid_argument("stage block counts must be non-negative");
  }
  if (config.total_blocks() < 1) throw std::invalid_argument("network needs at least one block");

  std::mt19937_64 rng(seed);
  Network net;
  net.config = config;

  const int base = 16 * config.widen;
  const std::array<int, 3> widths = {base, 2 * base, 4 * base};
  const int expansion = config.kind == BlockKind::Bottleneck ? 4 : 1;

  net.stem = make_conv(config.input_shape[0], base, 3, 1, 1, rng);

  int in_c = base;
  for (int stage = 0; stage < 3; ++stage) {
    const int mid = widths[static_cast<size_t>(stage)];
    const int out_c = mid * expansion;
    for (int b = 0; b < config.stage_blocks[static_cast<size_t>(stage)]; ++b) {
      const int stride = (stage > 0 && b == 0) ? 2 : 1;
      Block block;
      block.in_channels = in_c;
      block.out_channels = out_c;
      block.stride = stride;
      block.has_skip = config.skip_connections;
      for (int f = 0; f < config.functions_per_block; ++f) {
        if (config.kind == BlockKind::Basic) {
          block.functions.push_back(make_basic_function(in_c, out_c, stride, rng));
        } else {
          block.functions.push_back(make_bottleneck_function(in_c, mid, out_c, stride, rng));
        }
      }
      if (block.downsampling() && block.has_skip) {
        block.projection = make_conv(in_c, out_c, 1, stride, 0, rng);
      }
      net.blocks.push_back(std::move(block));
      in_c = out_c;
    }
  }

  net.head_norm = make_norm(in_c);
  net.fc_weight = he_normal({in_c, config.num_classes}, in_c, rng);
  net.fc_bias = Tensor::zeros({config.num_classes});
  net.fc_bias.set_requires_grad(true);
  return net;
}

Network build_linear_chain_network(int n_blocks, int k, double factor, int channels, int spatial,
                                   int num_classes, uint64_t seed) {
  if (n_blocks < 1 || k < 1) throw std::invalid_argument("linear chain needs n_blocks >= 1 and k >= 1");
  std::mt19937_64 rng(seed);

  auto identity_conv = [&](double scale) {
    Tensor w = Tensor::zeros({channels, channels, 1, 1});
    auto v = w.mutable_values();
    for (int c = 0; c < channels; ++c) v[static_cast<size_t>(c * channels + c)] = scale;
    w.set_requires_grad(true);
    ConvLayer conv;
    conv.weight = w;
    conv.stride = 1;
    conv.pad = 0;
    return conv;
  };

  Network net;
  net.config.kind = BlockKind::Basic;
  net.config.stage_blocks = {n_blocks, 0, 0};
  net.config.functions_per_block = k;
  net.config.num_classes = num_classes;
  net.config.input_shape = {channels, spatial, spatial};
  net.stem = identity_conv(1.0);
  for (int b = 0; b < n_blocks; ++b) {
    Block block;
    block.in_channels = channels;
    block.out_channels = channels;
    block.stride = 1;
    for (int f = 0; f < k; ++f) {
      ResidualFunction fn;
      fn.steps.emplace_back(identity_conv(factor));
      block.functions.push_back(std::move(fn));
    }
    net.blocks.push_back(std::move(block));
  }
  net.fc_weight = he_normal({channels, num_classes}, channels, rng);
  net.fc_bias = Tensor::zeros({num_classes});
  net.fc_bias.set_requires_grad(true);
  return net;
}

Tensor Network::block_forward(int block_index, const Tensor& input, Mode mode,
                              const BlockRoute* route) {
  Block& block = blocks.at(static_cast<size_t>(block_index));
  const int k = static_cast<int>(block.functions.size());

  bool include_skip = block.has_skip;
  std::vector<bool> mask(static_cast<size_t>(k), true);
  if (route != nullptr) {
    include_skip = block.has_skip && route->include_skip;
    if (!route->function_mask.empty()) {
      if (static_cast<int>(route->function_mask.size()) != k) {
        throw std::invalid_argument("route mask has " + std::to_string(route->function_mask.size()) +
                                    " entries for a block with " + std::to_string(k) + " functions");
      }
      mask = route->function_mask;
    }
  }

  Tensor acc;
  if (include_skip) {
    acc = block.projection ? conv2d(input, block.projection->weight, block.projection->stride,
                                    block.projection->pad)
                           : input;
  }
  for (int f = 0; f < k; ++f) {
    if (!mask[static_cast<size_t>(f)]) continue;
    Tensor out = apply_function(block.functions[static_cast<size_t>(f)], input, mode,
                                config.bn_eps, config.bn_momentum);
    acc = acc.defined() ? add(acc, out) : out;
  }
  if (!acc.defined()) {
    // nothing routed anywhere: all-zero output of the block's natural shape
    const int64_t out_h = (input.dim(2) - 1) / block.stride + 1;
    const int64_t out_w = (input.dim(3) - 1) / block.stride + 1;
    acc = Tensor::zeros({input.dim(0), block.out_channels, out_h, out_w});
  }
  return acc;
}

Tensor Network::forward(const Tensor& input, Mode mode, const Routes* routes) {
  if (routes != nullptr && routes->size() != blocks.size()) {
    throw std::invalid_argument("routes cover " + std::to_string(routes->size()) + " blocks, network has " +
                                std::to_string(blocks.size()));
  }
  Tensor cur = conv2d(input, stem.weight, stem.stride, stem.pad);
  for (size_t b = 0; b < blocks.size(); ++b) {
    if (!blocks[b].active) continue;  // lesioned: identity
    const BlockRoute* route = routes ? &(*routes)[b] : nullptr;
    cur = block_forward(static_cast<int>(b), cur, mode, route);
  }
  if (head_norm) {
    cur = batch_norm(cur, head_norm->gamma, head_norm->beta, head_norm->stats, mode,
                     config.bn_eps, config.bn_momentum);
    cur = relu(cur);
  }
  cur = global_avg_pool(cur);
  return linear(cur, fc_weight, fc_bias);
}

void Network::for_each_parameter(
    const std::function<void(const std::string&, Tensor&, const ParamInfo&)>& fn) {
  fn("stem.w", stem.weight, {});
  for (size_t b = 0; b < blocks.size(); ++b) {
    const std::string bp = "block" + std::to_string(b) + ".";
    Block& block = blocks[b];
    for (size_t f = 0; f < block.functions.size(); ++f) {
      const std::string fp = bp + "f" + std::to_string(f) + ".";
      int conv_i = 0, norm_i = 0;
      for (LayerStep& step : block.functions[f].steps) {
        if (auto* conv = std::get_if<ConvLayer>(&step)) {
          fn(fp + "conv" + std::to_string(conv_i++) + ".w", conv->weight, {.decay_exempt = false, .branch = true});
        } else if (auto* norm = std::get_if<NormLayer>(&step)) {
          const std::string np = fp + "bn" + std::to_string(norm_i++);
          fn(np + ".gamma", norm->gamma, {.decay_exempt = false, .branch = true});
          fn(np + ".beta", norm->beta, {.decay_exempt = true, .branch = true});
        }
      }
    }
    if (block.projection) {
      fn(bp + "proj.w", block.projection->weight, {});
    }
  }
  if (head_norm) {
    fn("head.bn.gamma", head_norm->gamma, {});
    fn("head.bn.beta", head_norm->beta, {.decay_exempt = true, .branch = false});
  }
  fn("fc.w", fc_weight, {});
  fn("fc.b", fc_bias, {.decay_exempt = true, .branch = false});
}

void Network::for_each_buffer(
    const std::function<void(const std::string&, std::vector<double>&)>& fn) {
  for (size_t b = 0; b < blocks.size(); ++b) {
    const std::string bp = "block" + std::to_string(b) + ".";
    for (size_t f = 0; f < blocks[b].functions.size(); ++f) {
      const std::string fp = bp + "f" + std::to_string(f) + ".";
      int norm_i = 0;
      for (LayerStep& step : blocks[b].functions[f].steps) {
        if (auto* norm = std::get_if<NormLayer>(&step)) {
          const std::string np = fp + "bn" + std::to_string(norm_i++);
          fn(np + ".running_mean", norm->stats.mean);
          fn(np + ".running_var", norm->stats.var);
        }
      }
    }
  }
  if (head_norm) {
    fn("head.bn.running_mean", head_norm->stats.mean);
    fn("head.bn.running_var", head_norm->stats.var);
  }
}

std::vector<int> Network::lesionable_blocks() const {
  std::vector<int> out;
  for (size_t b = 0; b < blocks.size(); ++b) {
    if (!blocks[b].downsampling()) out.push_back(static_cast<int>(b));
  }
  return out;
}

Network Network::clone() const {
  Network copy = *this;  // shares tensor storage
  copy.for_each_parameter([](const std::string&, Tensor& t, const ParamInfo&) { t = t.clone().set_requires_grad(true); });
  return copy;
}

uint64_t count_parameters(const Network& net) { return count_parameters_detail(net).total; }

ParamBreakdown count_parameters_detail(const Network& net) {
  ParamBreakdown out;
  const_cast<Network&>(net).for_each_parameter(
      [&](const std::string&, Tensor& t, const ParamInfo& info) {
        const uint64_t n = static_cast<uint64_t>(t.numel());
        out.total += n;
        if (info.branch) {
          out.branch += n;
        } else {
          out.shared += n;
        }
      });
  return out;
}

Network drop_block(const Network& net, int block_index) {
  if (block_index < 0 || block_index >= static_cast<int>(net.blocks.size())) {
    throw std::invalid_argument("drop_block: index " + std::to_string(block_index) +
                                " outside network of " + std::to_string(net.blocks.size()) + " blocks");
  }
  const Block& b = net.blocks[static_cast<size_t>(block_index)];
  if (b.downsampling()) {
    throw std::invalid_argument("drop_block: block " + std::to_string(block_index) +
                                " changes shape (" + std::to_string(b.in_channels) + "->" +
                                std::to_string(b.out_channels) + ", stride " + std::to_string(b.stride) +
                                "); identity replacement is undefined");
  }
  Network copy = net;
  copy.blocks[static_cast<size_t>(block_index)].active = false;
  return copy;
}

Routes sample_configuration(const Network& net, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p > 1.0) {
    throw std::invalid_argument("sample_configuration: p must lie in [0,1], got " + std::to_string(p));
  }
  std::bernoulli_distribution keep(p);
  Routes routes;
  routes.reserve(net.blocks.size());
  for (const Block& block : net.blocks) {
    BlockRoute route;
    route.include_skip = true;
    route.function_mask.resize(block.functions.size());
    for (size_t f = 0; f < block.functions.size(); ++f) {
      route.function_mask[f] = (p >= 1.0) ? true : (p <= 0.0 ? false : keep(rng));
    }
    routes.push_back(std::move(route));
  }
  return routes;
}

}  // namespace mrn
