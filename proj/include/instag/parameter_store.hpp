// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "instag/tensor.hpp"

namespace instag {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

/// Learning-rate group tag of a parameter array.
enum class ParamGroup : std::uint8_t { Grid = 0, Network = 1, Gaussian = 2 };

std::string_view group_name(ParamGroup g);
ParamGroup parse_group(std::string_view name);

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    ParamGroup group = ParamGroup::Network;
    double lr_scale = 1.0;
    bool trainable = true;
};

/// Named trainable arrays in registration order. Values are held in 64-bit;
/// `storage` controls rounding after updates and the checkpoint payload type.
class ParameterStore {
public:
    explicit ParameterStore(DType storage = DType::F64) : storage_(storage) {}

    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    Parameter& add(std::string name, Tensor init, ParamGroup group, double lr_scale = 1.0);

    bool contains(std::string_view name) const;
    Parameter& at(std::string_view name);
    const Parameter& at(std::string_view name) const;

    /// Replaces the array under `name` with a differently sized one. Only
    /// density control should call this; gradients are reset to zero.
    void resize_rows(std::string_view name, Tensor value);
    void remove(std::string_view name);

    void zero_grad();
    void round_to_storage();

    DType storage() const { return storage_; }
    void set_storage(DType d) { storage_ = d; }

    std::size_t count() const { return params_.size(); }
    std::size_t scalar_count() const;
    std::vector<Parameter*> all();
    std::vector<const Parameter*> all() const;
    std::vector<Parameter*> with_prefix(std::string_view prefix);

private:
    DType storage_;
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, Parameter*, std::less<>> index_;
};

}  // namespace instag
