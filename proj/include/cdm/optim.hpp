#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdm/tensor.hpp"

namespace cdm {

/// Named parameter with Adam moment buffers. Values are stored in f32 so a
/// checkpoint written mid-run restores the exact training state; all
/// arithmetic on them happens in f64.
struct ParamEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> m;
    std::vector<float> v;
};

class ParamStore {
  public:
    void add(const std::string& name, const std::vector<int>& shape, std::vector<float> init);
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    ParamEntry& entry(const std::string& name);
    const ParamEntry& entry(const std::string& name) const;
    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::vector<ParamEntry>& entries() { return entries_; }
    uint64_t step() const { return step_; }
    void set_step(uint64_t s) { step_ = s; }

  private:
    std::vector<ParamEntry> entries_;  // insertion order, drives file layout
    std::unordered_map<std::string, size_t> index_;
    uint64_t step_ = 0;
};

/// Leaf tensors for one forward/backward pass, in entry order.
struct BoundParams {
    ParamStore* store = nullptr;
    std::vector<ad::Tensor> leaves;
    std::unordered_map<std::string, size_t> index;

    const ad::Tensor& operator[](const std::string& name) const;
};

BoundParams bind(ParamStore& store, bool requires_grad = true);

/// Standard Adam (beta1 0.9, beta2 0.999, eps 1e-8) over every bound leaf.
/// Bias correction uses the store's shared step counter. Throws StateError
/// if any leaf is missing its gradient; gradients are zeroed afterwards.
void adam_step(ParamStore& store, BoundParams& bound, double lr);

/// Plain gradient descent over every bound leaf. Same gradient contract as
/// adam_step. Used by the cluster head, where Adam's per-coordinate
/// rescaling empirically drives the assignments into balanced-column
/// optima instead of community-aligned ones.
void sgd_step(ParamStore& store, BoundParams& bound, double lr);

/// Triangular cyclical schedule: lr_min -> lr_max over the first half cycle,
/// back down over the second, periodic.
struct CyclicalLrSchedule {
    double lr_min = 1e-4;
    double lr_max = 1e-1;
    int cycle_steps = 2000;
};

double lr_at(const CyclicalLrSchedule& schedule, uint64_t step);

// Checkpoint container: magic "CDM1", u32 version, then per tensor:
// u32 name length, UTF-8 name, u32 rank, u64 dims, f32 little-endian data.
// Optimizer state rides along as reserved "__adam_m__/__adam_v__/__step__"
// tensors so a reload resumes bit-exactly.
void save_checkpoint(const std::string& path, const ParamStore& store,
                     bool include_optimizer_state = true);
ParamStore load_checkpoint(const std::string& path);

/// Single-matrix convenience on the same container format.
void save_matrix(const std::string& path, const std::string& name, const Matrix& m);
Matrix load_matrix(const std::string& path, const std::string& name);

}  // namespace cdm
