#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "mrn/model.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace mrn {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void write_raw(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  write_raw(os, &v, sizeof(T));
}

void write_entry(std::ostream& os, const std::string& name, const Shape& shape,
                 const std::vector<double>& data) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
  write_raw(os, name.data(), name.size());
  write_pod<uint32_t>(os, static_cast<uint32_t>(shape.size()));
  for (int64_t d : shape) write_pod<int64_t>(os, d);
  write_raw(os, data.data(), data.size() * sizeof(double));
}

void read_raw(std::istream& is, void* p, size_t n, const char* what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
  }
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v;
  read_raw(is, &v, sizeof(T), what);
  return v;
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& path,
                     const std::map<std::string, std::vector<double>>& extra) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint file for writing: " + path);
  write_raw(os, kMagic, sizeof(kMagic));
  write_pod<uint32_t>(os, kVersion);

  const NetworkConfig& c = net.config;
  write_pod<uint8_t>(os, c.kind == BlockKind::Basic ? 0 : 1);
  for (int n : c.stage_blocks) write_pod<int32_t>(os, n);
  write_pod<int32_t>(os, c.functions_per_block);
  write_pod<int32_t>(os, c.widen);
  write_pod<int32_t>(os, c.num_classes);
  for (int n : c.input_shape) write_pod<int32_t>(os, n);
  write_pod<uint8_t>(os, c.skip_connections ? 1 : 0);
  write_pod<double>(os, c.bn_eps);
  write_pod<double>(os, c.bn_momentum);

  uint32_t count = 0;
  Network& mut = const_cast<Network&>(net);
  mut.for_each_parameter([&](const std::string&, Tensor&, const ParamInfo&) { ++count; });
  mut.for_each_buffer([&](const std::string&, std::vector<double>&) { ++count; });
  count += static_cast<uint32_t>(extra.size());
  write_pod<uint32_t>(os, count);

  mut.for_each_parameter([&](const std::string& name, Tensor& t, const ParamInfo&) {
    write_entry(os, name, t.shape(), {t.values().begin(), t.values().end()});
  });
  mut.for_each_buffer([&](const std::string& name, std::vector<double>& v) {
    write_entry(os, name, {static_cast<int64_t>(v.size())}, v);
  });
  for (const auto& [name, data] : extra) {
    write_entry(os, name, {static_cast<int64_t>(data.size())}, data);
  }
  if (!os) throw std::runtime_error("write failed for checkpoint file: " + path);
}

Network load_checkpoint(const std::string& path,
                        std::map<std::string, std::vector<double>>* extra) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint file: " + path);
  char magic[8];
  read_raw(is, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  }
  const uint32_t version = read_pod<uint32_t>(is, "version");
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }

  NetworkConfig c;
  c.kind = read_pod<uint8_t>(is, "kind") == 0 ? BlockKind::Basic : BlockKind::Bottleneck;
  for (int& n : c.stage_blocks) n = read_pod<int32_t>(is, "stage_blocks");
  c.functions_per_block = read_pod<int32_t>(is, "k");
  c.widen = read_pod<int32_t>(is, "widen");
  c.num_classes = read_pod<int32_t>(is, "num_classes");
  for (int& n : c.input_shape) n = read_pod<int32_t>(is, "input_shape");
  c.skip_connections = read_pod<uint8_t>(is, "skip_connections") != 0;
  c.bn_eps = read_pod<double>(is, "bn_eps");
  c.bn_momentum = read_pod<double>(is, "bn_momentum");

  Network net = build_network(c, 0);

  const uint32_t count = read_pod<uint32_t>(is, "entry count");
  std::map<std::string, std::pair<Shape, std::vector<double>>> entries;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = read_pod<uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    read_raw(is, name.data(), name_len, "name");
    const uint32_t rank = read_pod<uint32_t>(is, "rank");
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = read_pod<int64_t>(is, "dims");
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    read_raw(is, data.data(), data.size() * sizeof(double), name.c_str());
    entries.emplace(name, std::make_pair(std::move(shape), std::move(data)));
  }

  net.for_each_parameter([&](const std::string& name, Tensor& t, const ParamInfo&) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint is missing parameter " + name);
    if (it->second.first != t.shape()) {
      throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                               shape_str(it->second.first) + ", expected " + shape_str(t.shape()));
    }
    std::copy(it->second.second.begin(), it->second.second.end(), t.mutable_values().begin());
    entries.erase(it);
  });
  net.for_each_buffer([&](const std::string& name, std::vector<double>& v) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint is missing buffer " + name);
    if (it->second.second.size() != v.size()) {
      throw std::runtime_error("checkpoint buffer " + name + " has wrong length");
    }
    v = it->second.second;
    entries.erase(it);
  });
  if (extra != nullptr) {
    for (auto& [name, e] : entries) (*extra)[name] = std::move(e.second);
  }
  return net;
}

}  // namespace mrn
