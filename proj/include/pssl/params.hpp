#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pssl/rng.hpp"
#include "pssl/tensor.hpp"

namespace pssl {

/// Ordered collection of named tensors. Order is registration order and is
/// what checkpoints, optimizers and EMA iterate over.
template <class T>
class ParamSet {
public:
    std::size_t add(const std::string& name, Shape shape, T fill = T(0)) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
        index_[name] = tensors_.size();
        names_.push_back(name);
        tensors_.emplace_back(std::move(shape), fill);
        return tensors_.size() - 1;
    }

    std::size_t size() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    const std::vector<std::string>& names() const { return names_; }

    Tensor<T>& operator[](std::size_t i) { return tensors_[i]; }
    const Tensor<T>& operator[](std::size_t i) const { return tensors_[i]; }
    Tensor<T>& at(const std::string& name) { return tensors_.at(find(name)); }
    const Tensor<T>& at(const std::string& name) const { return tensors_.at(find(name)); }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter " + name);
        return it->second;
    }

    Eigen::Map<Mat<T>> mat(std::size_t i) { return tensors_[i].matrix(); }
    Eigen::Map<const Mat<T>> mat(std::size_t i) const { return tensors_[i].matrix(); }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    ParamSet zeros_like() const {
        ParamSet out;
        for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].shape());
        return out;
    }

    void zero() {
        for (auto& t : tensors_) t.fill(T(0));
    }

    bool same_layout(const ParamSet& o) const {
        if (o.size() != size()) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (o.names_[i] != names_[i] || o.tensors_[i].shape() != tensors_[i].shape()) return false;
        return true;
    }

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (std::size_t i = 0; i < size(); ++i) {
            out.add(names_[i], tensors_[i].shape());
            out[i] = tensors_[i].template cast<U>();
        }
        return out;
    }

    /// Appends every tensor of `other` under `prefix`.
    void append(const std::string& prefix, const ParamSet& other) {
        for (std::size_t i = 0; i < other.size(); ++i) {
            add(prefix + other.name(i), other[i].shape());
            tensors_.back() = other[i];
        }
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::map<std::string, std::size_t> index_;
};

template <class T>
void init_trunc_normal(Tensor<T>& t, double sigma, Rng& rng) {
    for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(sigma));
}

}  // namespace pssl
