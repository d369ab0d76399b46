#include "cdmm/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cdmm/binary_io.hpp"
#include "cdmm/error.hpp"

namespace cdmm {

Tensor& ParameterSet::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

const Tensor* ParameterSet::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &entries_[it->second].second;
}

const Tensor& ParameterSet::get(std::string_view name) const {
  const Tensor* t = find(name);
  if (!t) throw ContractError("unknown parameter: " + std::string(name));
  return *t;
}

Tensor& ParameterSet::get(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).get(name));
}

std::size_t ParameterSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.numel();
  return n;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& [name, t] : entries_) out.add(name, Tensor(t.shape()));
  return out;
}

void ParameterSet::add_scaled(const ParameterSet& other, double c) {
  if (other.size() != size()) throw DimensionError("parameter sets differ in size");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto dst = entries_[i].second.values();
    auto src = other.entries_[i].second.values();
    if (dst.size() != src.size()) throw DimensionError("parameter " + entries_[i].first + " shape mismatch");
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += c * src[j];
  }
}

bool ParameterSet::all_finite() const {
  for (const auto& [_, t] : entries_)
    for (double v : t.values())
      if (!std::isfinite(v)) return false;
  return true;
}

std::uint64_t hash_parameters(const ParameterSet& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : ps.entries()) {
    feed(name.data(), name.size());
    for (auto e : t.shape()) feed(&e, sizeof e);
    feed(t.values().data(), t.numel() * sizeof(double));
  }
  return h;
}

Tensor random_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

ad::Var Binder::operator()(std::string_view name) {
  auto it = bound_.find(std::string(name));
  if (it != bound_.end()) return it->second;
  ad::Var v = graph_.parameter(params_.get(name), trainable_);
  bound_.emplace(std::string(name), v);
  return v;
}

ParameterSet Binder::gradients() const {
  ParameterSet out = params_.zeros_like();
  for (const auto& [name, var] : bound_) {
    if (const Tensor* g = graph_.grad(var)) out.get(name) = *g;
  }
  return out;
}

void write_tensor_file(const std::filesystem::path& path, std::string_view magic,
                       std::uint32_t version, const ParameterSet& tensors) {
  ByteWriter w;
  w.bytes(magic);
  w.u32(version);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors.entries()) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (double v : t.values()) w.f64(v);
  }
  w.save(path);
}

ParameterSet read_tensor_file(const std::filesystem::path& path, std::string_view magic,
                              std::uint32_t version) {
  ByteReader r = ByteReader::open(path);
  r.expect_magic(magic);
  const std::uint64_t version_at = r.offset();
  if (const auto v = r.u32(); v != version) {
    throw FormatError("unsupported format version " + std::to_string(v), version_at);
  }
  const std::uint32_t count = r.u32();
  ParameterSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t entry_at = r.offset();
    const std::uint32_t name_len = r.u32();
    std::string name = r.string(name_len);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("bad tensor rank " + std::to_string(rank), entry_at);
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& e : shape) {
      e = r.u32();
      if (e == 0) throw FormatError("zero tensor extent in '" + name + "'", r.offset() - 4);
      n *= e;
      if (n * 8 > r.remaining()) throw FormatError("tensor '" + name + "' exceeds file size", r.offset());
    }
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64();
    if (out.contains(name)) throw FormatError("duplicate tensor '" + name + "'", entry_at);
    out.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
  return out;
}

}  // namespace cdmm
