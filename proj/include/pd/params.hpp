#pragma once

#include <map>
#include <string>

#include "pd/tensor.hpp"

namespace pd {

// Named parameter entry. Non-trainable entries hold buffers such as
// batch-norm running statistics; `decay` marks eligibility for weight decay.
template <typename T>
struct ParamEntry {
    Tensor<T> value;
    bool trainable = true;
    bool decay = true;
};

template <typename T>
struct ParamStore {
    std::map<std::string, ParamEntry<T>> entries;

    void add(const std::string& name, Tensor<T> value, bool trainable = true,
             bool decay = true) {
        if (entries.count(name)) throw InvalidArgument("duplicate parameter: " + name);
        entries[name] = ParamEntry<T>{std::move(value), trainable, decay};
    }

    bool has(const std::string& name) const { return entries.count(name) != 0; }

    ParamEntry<T>& entry(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw InvalidArgument("unknown parameter: " + name);
        return it->second;
    }
    const ParamEntry<T>& entry(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw InvalidArgument("unknown parameter: " + name);
        return it->second;
    }

    Tensor<T>& at(const std::string& name) { return entry(name).value; }
    const Tensor<T>& at(const std::string& name) const { return entry(name).value; }

    std::int64_t trainable_count() const {
        std::int64_t n = 0;
        for (const auto& [name, e] : entries)
            if (e.trainable) n += e.value.numel();
        return n;
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [name, e] : entries) n += e.value.numel();
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, e] : entries)
            out.add(name, e.value.template cast<U>(), e.trainable, e.decay);
        return out;
    }
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

template <typename T>
inline void grad_map_add(GradMap<T>& dst, const std::string& name, const Tensor<T>& g,
                         T scale = T(1)) {
    auto it = dst.find(name);
    if (it == dst.end()) {
        Tensor<T> t(g.shape);
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = g.data[i] * scale;
        dst.emplace(name, std::move(t));
    } else {
        for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i] * scale;
    }
}

}  // namespace pd
