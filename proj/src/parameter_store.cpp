// SPDX-License-Identifier: Apache-2.0
#include "instag/parameter_store.hpp"

#include <algorithm>

#include "instag/errors.hpp"

namespace instag {

std::string_view group_name(ParamGroup g) {
    switch (g) {
    case ParamGroup::Grid: return "grid";
    case ParamGroup::Network: return "network";
    case ParamGroup::Gaussian: return "gaussian";
    }
    return "network";
}

ParamGroup parse_group(std::string_view name) {
    if (name == "grid") return ParamGroup::Grid;
    if (name == "network") return ParamGroup::Network;
    if (name == "gaussian") return ParamGroup::Gaussian;
    throw ConfigError("unknown parameter group '" + std::string(name) + "'");
}

Parameter& ParameterStore::add(std::string name, Tensor init, ParamGroup group, double lr_scale) {
    if (index_.contains(name)) throw UsageError("parameter '" + name + "' already registered");
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->grad = Tensor(init.rows, init.cols);
    p->value = std::move(init);
    p->group = group;
    p->lr_scale = lr_scale;
    Parameter* raw = p.get();
    index_.emplace(raw->name, raw);
    params_.push_back(std::move(p));
    return *raw;
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

Parameter& ParameterStore::at(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
    return *it->second;
}

const Parameter& ParameterStore::at(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
    return *it->second;
}

void ParameterStore::resize_rows(std::string_view name, Tensor value) {
    Parameter& p = at(name);
    if (value.cols != p.value.cols) throw UsageError("resize_rows: column count of '" + p.name + "' is fixed");
    p.grad = Tensor(value.rows, value.cols);
    p.value = std::move(value);
}

void ParameterStore::remove(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) return;
    Parameter* raw = it->second;
    index_.erase(it);
    std::erase_if(params_, [raw](const auto& p) { return p.get() == raw; });
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p->grad.fill(0.0);
}

void ParameterStore::round_to_storage() {
    if (storage_ != DType::F32) return;
    for (auto& p : params_)
        for (double& v : p->value.data) v = static_cast<double>(static_cast<float>(v));
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

std::vector<Parameter*> ParameterStore::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
    std::vector<const Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

std::vector<Parameter*> ParameterStore::with_prefix(std::string_view prefix) {
    std::vector<Parameter*> out;
    for (auto& p : params_)
        if (std::string_view(p->name).starts_with(prefix)) out.push_back(p.get());
    return out;
}

}  // namespace instag
