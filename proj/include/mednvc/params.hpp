#pragma once

// Ordered, named parameter registry. Order is insertion order and defines
// the checkpoint layout and the optimizer slot order.

#include <string>
#include <unordered_map>
#include <vector>

#include "mednvc/errors.hpp"
#include "mednvc/tensor.hpp"

namespace mednvc {

template <typename T>
class ParamSet {
public:
    void add(const std::string& name, const Ptr<T>& p) {
        if (index_.count(name)) throw dim_error("param set: duplicate name " + name);
        index_[name] = items_.size();
        items_.push_back({name, p});
    }

    const Ptr<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw dim_error("param set: unknown name " + name);
        return items_[it->second].second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return items_.size(); }
    const std::pair<std::string, Ptr<T>>& at(std::size_t i) const { return items_[i]; }

    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    std::size_t total_numel() const {
        std::size_t n = 0;
        for (const auto& [name, p] : items_) n += p->numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, p] : items_) p->zero_grad();
    }

private:
    std::vector<std::pair<std::string, Ptr<T>>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace mednvc
