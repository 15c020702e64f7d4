#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "mrn/tensor.hpp"

namespace mrn {

enum class BlockKind { Basic, Bottleneck };

/// Declarative description of a (multi-)residual network: three stages of
/// blocks at widths 16w/32w/64w, k residual functions per block.
struct NetworkConfig {
  BlockKind kind = BlockKind::Basic;
  std::array<int, 3> stage_blocks{1, 1, 1};
  int functions_per_block = 1;  // k
  int widen = 1;                // w
  int num_classes = 10;
  std::array<int, 3> input_shape{3, 32, 32};  // C,H,W
  bool skip_connections = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;

  /// Derives the per-stage block count from a reported depth: 6n+2 layers for
  /// basic blocks, 9n+2 for bottleneck blocks (n blocks per stage). Rejects
  /// depths that do not fit the formula.
  static NetworkConfig from_depth(int depth, int k, int w, BlockKind kind,
                                  int num_classes = 10,
                                  std::array<int, 3> input_shape = {3, 32, 32});

  int total_blocks() const { return stage_blocks[0] + stage_blocks[1] + stage_blocks[2]; }
  int convs_per_function() const { return kind == BlockKind::Basic ? 2 : 3; }
  /// Reported depth: convolution layers on one function path plus stem and
  /// classifier. Equals 6n+2 / 9n+2 for uniform stages.
  int depth() const { return convs_per_function() * total_blocks() + 2; }
};

struct ConvLayer {
  Tensor weight;  // [F,C,kh,kw]
  int stride = 1;
  int pad = 1;
};

struct NormLayer {
  Tensor gamma;
  Tensor beta;
  RunningStats stats;
};

struct ReluLayer {};

using LayerStep = std::variant<ConvLayer, NormLayer, ReluLayer>;

/// One residual function f^i: a pre-activation chain of norm/relu/conv steps.
struct ResidualFunction {
  std::vector<LayerStep> steps;
};

struct Block {
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  bool has_skip = true;
  std::optional<ConvLayer> projection;  // 1x1 on downsampling blocks
  std::vector<ResidualFunction> functions;
  bool active = true;  // false when lesioned: the block acts as identity

  bool downsampling() const { return in_channels != out_channels || stride != 1; }
};

/// Per-block routing: which residual functions participate and whether the
/// skip path is taken. Defaults reproduce the normal forward rule
/// x + sum_i f^i(x).
struct BlockRoute {
  bool include_skip = true;
  std::vector<bool> function_mask;  // empty means all on
};

using Routes = std::vector<BlockRoute>;

struct ParamInfo {
  bool decay_exempt = false;  // norm beta and biases skip weight decay
  bool branch = false;        // lives inside a residual function
};

class Network {
 public:
  NetworkConfig config;
  ConvLayer stem;
  std::vector<Block> blocks;
  std::optional<NormLayer> head_norm;
  Tensor fc_weight;  // [C, classes]
  Tensor fc_bias;    // [classes]

  /// Full forward pass. Routes, when given, must have one entry per block.
  Tensor forward(const Tensor& input, Mode mode, const Routes* routes = nullptr);

  /// Forward of a single block: returns skip(x) + sum of masked functions.
  Tensor block_forward(int block_index, const Tensor& input, Mode mode,
                       const BlockRoute* route = nullptr);

  void for_each_parameter(const std::function<void(const std::string&, Tensor&, const ParamInfo&)>& fn);
  void for_each_buffer(const std::function<void(const std::string&, std::vector<double>&)>& fn);

  /// Indices of blocks that can be replaced by the identity (shape-preserving).
  std::vector<int> lesionable_blocks() const;

  /// Deep copy with independent parameter storage.
  Network clone() const;
};

Network build_network(const NetworkConfig& config, uint64_t seed);

/// Chain of n width-preserving blocks whose k residual functions are each a
/// 1x1 convolution fixed to factor * identity, with an identity stem and a
/// seeded linear head. The whole map is linear, so per-path gradients obey a
/// closed-form geometric decay.
Network build_linear_chain_network(int n_blocks, int k, double factor, int channels,
                                   int spatial, int num_classes, uint64_t seed);

uint64_t count_parameters(const Network& net);

struct ParamBreakdown {
  uint64_t total = 0;
  uint64_t branch = 0;  // inside residual functions; scales with k
  uint64_t shared = 0;  // stem, head, projections
};
ParamBreakdown count_parameters_detail(const Network& net);

/// Copy of the network with one shape-preserving block replaced by the
/// identity at evaluation. Downsampling blocks are rejected. Parameters are
/// shared with the original.
Network drop_block(const Network& net, int block_index);

/// Independent Bernoulli(p) mask per residual function per block; skip paths
/// stay on. Deterministic under a fixed generator state.
Routes sample_configuration(const Network& net, double p, std::mt19937_64& rng);

// --- checkpoint io -----------------------------------------------------------
// Flat little-endian binary: magic, version, config record, then one record
// per named tensor (name length, name, rank, dims, raw 64-bit floats).
// Round-trips bit-exactly.

void save_checkpoint(const Network& net, const std::string& path,
                     const std::map<std::string, std::vector<double>>& extra = {});
Network load_checkpoint(const std::string& path,
                        std::map<std::string, std::vector<double>>* extra = nullptr);

}  // namespace mrn
