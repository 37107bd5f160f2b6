#include "cdm/optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace cdm {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

constexpr char kMagic[4] = {'C', 'D', 'M', '1'};
constexpr uint32_t kVersion = 1;
const std::string kAdamM = "__adam_m__";
const std::string kAdamV = "__adam_v__";
const std::string kStepName = "__step__";

size_t shape_size(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

template <typename T>
void write_pod(std::ofstream& f, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw FormatError("truncated checkpoint");
    return v;
}

void write_tensor(std::ofstream& f, const std::string& name, const std::vector<int>& shape,
                  const std::vector<float>& data) {
    write_pod(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(f, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_pod(f, static_cast<uint64_t>(d));
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

struct RawTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

std::vector<RawTensor> read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic: " + path);
    }
    const auto version = read_pod<uint32_t>(f);
    if (version != kVersion) throw FormatError("unsupported checkpoint version");

    std::vector<RawTensor> out;
    while (true) {
        uint32_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (f.eof()) break;
        if (!f) throw FormatError("truncated checkpoint: " + path);
        RawTensor t;
        t.name.resize(name_len);
        f.read(t.name.data(), name_len);
        const auto rank = read_pod<uint32_t>(f);
        size_t total = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const auto d = read_pod<uint64_t>(f);
            t.shape.push_back(static_cast<int>(d));
            total *= d;
        }
        t.data.resize(total);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(total * sizeof(float)));
        if (!f) throw FormatError("truncated tensor data: " + path);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace

void ParamStore::add(const std::string& name, const std::vector<int>& shape,
                     std::vector<float> init) {
    if (index_.count(name)) throw StateError("duplicate parameter name: " + name);
    if (init.size() != shape_size(shape)) throw ShapeError("init size mismatch for " + name);
    ParamEntry e;
    e.name = name;
    e.shape = shape;
    e.value = std::move(init);
    e.m.assign(e.value.size(), 0.0f);
    e.v.assign(e.value.size(), 0.0f);
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
}

ParamEntry& ParamStore::entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter: " + name);
    return entries_[it->second];
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter: " + name);
    return entries_[it->second];
}

const ad::Tensor& BoundParams::operator[](const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw StateError("unknown bound parameter: " + name);
    return leaves[it->second];
}

BoundParams bind(ParamStore& store, bool requires_grad) {
    BoundParams bound;
    bound.store = &store;
    bound.leaves.reserve(store.entries().size());
    for (const auto& e : store.entries()) {
        std::vector<double> data(e.value.begin(), e.value.end());
        bound.index[e.name] = bound.leaves.size();
        bound.leaves.push_back(ad::Tensor::from_data(e.shape, std::move(data), requires_grad));
    }
    return bound;
}

void adam_step(ParamStore& store, BoundParams& bound, double lr) {
    if (bound.store != &store) throw StateError("adam_step: bound params from another store");
    for (size_t i = 0; i < bound.leaves.size(); ++i) {
        if (!bound.leaves[i].has_grad()) {
            throw StateError("adam_step: missing gradient for " + store.entries()[i].name);
        }
    }
    store.set_step(store.step() + 1);
    const auto t = static_cast<double>(store.step());
    const double bc1 = 1.0 - std::pow(kBeta1, t);
    const double bc2 = 1.0 - std::pow(kBeta2, t);

    for (size_t i = 0; i < bound.leaves.size(); ++i) {
        ParamEntry& e = store.entries()[i];
        auto& grad = bound.leaves[i].node()->grad;
        for (size_t j = 0; j < e.value.size(); ++j) {
            const double g = grad[j];
            const double m = kBeta1 * static_cast<double>(e.m[j]) + (1.0 - kBeta1) * g;
            const double v = kBeta2 * static_cast<double>(e.v[j]) + (1.0 - kBeta2) * g * g;
            e.m[j] = static_cast<float>(m);
            e.v[j] = static_cast<float>(v);
            const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + kEps);
            e.value[j] = static_cast<float>(static_cast<double>(e.value[j]) - update);
        }
        std::fill(grad.begin(), grad.end(), 0.0);
    }
}

void sgd_step(ParamStore& store, BoundParams& bound, double lr) {
    if (bound.store != &store) throw StateError("sgd_step: bound params from another store");
    for (size_t i = 0; i < bound.leaves.size(); ++i) {
        if (!bound.leaves[i].has_grad()) {
            throw StateError("sgd_step: missing gradient for " + store.entries()[i].name);
        }
    }
    store.set_step(store.step() + 1);
    for (size_t i = 0; i < bound.leaves.size(); ++i) {
        ParamEntry& e = store.entries()[i];
        auto& grad = bound.leaves[i].node()->grad;
        for (size_t j = 0; j < e.value.size(); ++j) {
            e.value[j] = static_cast<float>(static_cast<double>(e.value[j]) - lr * grad[j]);
        }
        std::fill(grad.begin(), grad.end(), 0.0);
    }
}

double lr_at(const CyclicalLrSchedule& schedule, uint64_t step) {
    if (schedule.cycle_steps < 2 || schedule.lr_min <= 0.0 ||
        schedule.lr_min >= schedule.lr_max) {
        throw ArgumentError("invalid cyclical lr schedule");
    }
    const auto cycle = static_cast<uint64_t>(schedule.cycle_steps);
    const auto phase = static_cast<double>(step % cycle);
    const double half = static_cast<double>(cycle) / 2.0;
    const double span = schedule.lr_max - schedule.lr_min;
    if (phase <= half) return schedule.lr_min + span * (phase / half);
    return schedule.lr_max - span * ((phase - half) / half);
}

void save_checkpoint(const std::string& path, const ParamStore& store,
                     bool include_optimizer_state) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write(kMagic, 4);
    write_pod(f, kVersion);
    for (const auto& e : store.entries()) write_tensor(f, e.name, e.shape, e.value);
    if (include_optimizer_state) {
        for (const auto& e : store.entries()) write_tensor(f, kAdamM + e.name, e.shape, e.m);
        for (const auto& e : store.entries()) write_tensor(f, kAdamV + e.name, e.shape, e.v);
        const std::vector<float> step_data = {static_cast<float>(store.step())};
        write_tensor(f, kStepName, {1}, step_data);
    }
    if (!f) throw FormatError("short write: " + path);
}

ParamStore load_checkpoint(const std::string& path) {
    ParamStore store;
    for (auto& t : read_container(path)) {
        if (t.name == kStepName) {
            store.set_step(static_cast<uint64_t>(t.data.at(0)));
        } else if (t.name.rfind(kAdamM, 0) == 0) {
            store.entry(t.name.substr(kAdamM.size())).m = std::move(t.data);
        } else if (t.name.rfind(kAdamV, 0) == 0) {
            store.entry(t.name.substr(kAdamV.size())).v = std::move(t.data);
        } else {
            store.add(t.name, t.shape, std::move(t.data));
        }
    }
    return store;
}

void save_matrix(const std::string& path, const std::string& name, const Matrix& m) {
    ParamStore store;
    std::vector<float> data(m.v.begin(), m.v.end());
    store.add(name, {m.rows, m.cols}, std::move(data));
    save_checkpoint(path, store, false);
}

Matrix load_matrix(const std::string& path, const std::string& name) {
    ParamStore store = load_checkpoint(path);
    const ParamEntry& e = store.entry(name);
    if (e.shape.size() != 2) throw FormatError("stored tensor is not a matrix: " + name);
    Matrix m(e.shape[0], e.shape[1]);
    for (size_t i = 0; i < e.value.size(); ++i) m.v[i] = static_cast<double>(e.value[i]);
    return m;
}

}  // namespace cdm
