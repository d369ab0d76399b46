#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdmm/autodiff.hpp"
#include "cdmm/rng.hpp"
#include "cdmm/tensor.hpp"

namespace cdmm {

// Ordered collection of named tensors. Order is insertion order and is what the
// checkpoint writer, the optimizer and the hashing routines iterate over.
class ParameterSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  Tensor& add(std::string name, Tensor value);
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  const Tensor* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  // Same names and shapes, every value zero.
  ParameterSet zeros_like() const;
  void add_scaled(const ParameterSet& other, double c);
  bool all_finite() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// FNV-1a over names, shapes and the raw bytes of every value.
std::uint64_t hash_parameters(const ParameterSet& ps);

// Normal(0, std) entries.
Tensor random_normal(Shape shape, double stddev, Rng& rng);

// Lazily binds the tensors of a ParameterSet into a graph, one node per name.
class Binder {
 public:
  Binder(ad::Graph& graph, const ParameterSet& params, bool trainable)
      : graph_(graph), params_(params), trainable_(trainable) {}

  ad::Var operator()(std::string_view name);
  ad::Graph& graph() const { return graph_; }
  const ParameterSet& params() const { return params_; }

  // Gradients for every parameter; zero for parameters the loss never touched.
  ParameterSet gradients() const;

 private:
  ad::Graph& graph_;
  const ParameterSet& params_;
  bool trainable_;
  std::unordered_map<std::string, ad::Var> bound_;
};

// Tensor-manifest files: magic, format version u32, tensor count u32, then per
// tensor name length u32, UTF-8 name, rank u32, extents u32[rank], little-endian f64 values.
void write_tensor_file(const std::filesystem::path& path, std::string_view magic,
                       std::uint32_t version, const ParameterSet& tensors);
ParameterSet read_tensor_file(const std::filesystem::path& path, std::string_view magic,
                              std::uint32_t version);

}  // namespace cdmm
