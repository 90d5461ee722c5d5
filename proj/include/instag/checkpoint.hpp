// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "instag/optimizer.hpp"
#include "instag/parameter_store.hpp"

namespace instag {

/// Binary container layout (all integers little-endian):
///   "ITAG" | version u32 | record count u64 |
///   per record: name length u32, UTF-8 name, dtype u8 (0 f32, 1 f64),
///               rank u64, dims u64[rank], raw payload.
/// Optimizer state lives under "opt/step", "opt/m/<name>", "opt/v/<name>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    DType dtype = DType::F64;
    Tensor value;
};

class Checkpoint {
public:
    void put(std::string name, Tensor value, DType dtype = DType::F64);
    bool contains(std::string_view name) const;
    const Tensor& get(std::string_view name) const;
    const NamedArray* find(std::string_view name) const;
    std::vector<const NamedArray*> with_prefix(std::string_view prefix) const;
    const std::vector<NamedArray>& entries() const { return entries_; }

    /// Copies every parameter of `store` (optionally only those under `prefix`).
    void put_store(const ParameterStore& store, std::string_view prefix = "");
    void put_optimizer(const AdamW& opt, const ParameterStore& store);

    /// Loads values for parameters already registered in `store`; shapes must match
    /// unless `allow_resize` (density-controlled arrays).
    void load_into(ParameterStore& store, std::string_view prefix = "", bool allow_resize = false) const;
    void load_optimizer(AdamW& opt) const;

private:
    std::vector<NamedArray> entries_;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

}  // namespace instag
