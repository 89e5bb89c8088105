#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lfinet/rng.hpp"
#include "lfinet/tensor.hpp"

namespace lfinet {

// Ordered, uniquely named set of trainable tensors. Order is the creation
// order and doubles as the checkpoint blob order.
template <typename T>
class ParamSet {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
    };

    void add(const std::string& name, Tensor<T> tensor) {
        require(index_.emplace(name, items_.size()).second,
                "params: duplicate parameter name '", name, "'");
        items_.push_back({name, std::move(tensor)});
    }

    Tensor<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &items_[it->second].tensor;
    }

    const std::vector<Entry>& items() const { return items_; }
    std::vector<Entry>& items_mut() { return items_; }
    size_t size() const { return items_.size(); }

    index_t total_values() const {
        index_t n = 0;
        for (const auto& e : items_) n += e.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : items_) e.tensor.zero_grad();
    }

private:
    std::vector<Entry> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Non-trainable float state that still belongs in a checkpoint (BN running
// statistics). Entries point at module-owned storage.
template <typename T>
class BufferSet {
public:
    struct Entry {
        std::string name;
        std::vector<T>* values;
    };

    void add(const std::string& name, std::vector<T>* values) {
        require(index_.emplace(name, items_.size()).second, "buffers: duplicate name '", name,
                "'");
        items_.push_back({name, values});
    }

    const std::vector<Entry>& items() const { return items_; }
    size_t size() const { return items_.size(); }

private:
    std::vector<Entry> items_;
    std::unordered_map<std::string, size_t> index_;
};

// --- Initializers ----------------------------------------------------------

template <typename T>
Tensor<T> kaiming_uniform(Shape shape, index_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<T> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
    std::vector<T> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

template <typename T>
Tensor<T> const_init(Shape shape, T value) {
    return Tensor<T>::filled(std::move(shape), value, /*requires_grad=*/true);
}

}  // namespace lfinet
