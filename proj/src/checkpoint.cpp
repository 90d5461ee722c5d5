// SPDX-License-Identifier: Apache-2.0
#include "instag/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "instag/errors.hpp"

namespace instag {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void Checkpoint::put(std::string name, Tensor value, DType dtype) {
    for (auto& e : entries_)
        if (e.name == name) {
            e.value = std::move(value);
            e.dtype = dtype;
            return;
        }
    entries_.push_back({std::move(name), dtype, std::move(value)});
}

const NamedArray* Checkpoint::find(std::string_view name) const {
    for (const auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

bool Checkpoint::contains(std::string_view name) const { return find(name) != nullptr; }

const Tensor& Checkpoint::get(std::string_view name) const {
    const NamedArray* e = find(name);
    if (!e) throw ConfigError("checkpoint has no entry '" + std::string(name) + "'");
    return e->value;
}

std::vector<const NamedArray*> Checkpoint::with_prefix(std::string_view prefix) const {
    std::vector<const NamedArray*> out;
    for (const auto& e : entries_)
        if (std::string_view(e.name).starts_with(prefix)) out.push_back(&e);
    return out;
}

void Checkpoint::put_store(const ParameterStore& store, std::string_view prefix) {
    for (const Parameter* p : store.all())
        if (std::string_view(p->name).starts_with(prefix)) put(p->name, p->value, store.storage());
}

void Checkpoint::put_optimizer(const AdamW& opt, const ParameterStore& store) {
    put("opt/step", Tensor::scalar(static_cast<double>(opt.step_count())));
    // Store order keeps the file layout independent of map ordering quirks.
    for (const Parameter* p : store.all()) {
        if (!opt.has_moments(p->name)) continue;
        const Moments& m = opt.all_moments().find(p->name)->second;
        put("opt/m/" + p->name, m.m);
        put("opt/v/" + p->name, m.v);
    }
}

void Checkpoint::load_into(ParameterStore& store, std::string_view prefix, bool allow_resize) const {
    for (Parameter* p : store.all()) {
        if (!std::string_view(p->name).starts_with(prefix)) continue;
        const NamedArray* e = find(p->name);
        if (!e) throw ConfigError("checkpoint is missing parameter '" + p->name + "'");
        if (!e->value.same_shape(p->value)) {
            if (!allow_resize || e->value.cols != p->value.cols)
                throw ConfigError("checkpoint shape mismatch for '" + p->name + "'");
            store.resize_rows(p->name, e->value);
        } else {
            p->value = e->value;
        }
    }
}

void Checkpoint::load_optimizer(AdamW& opt) const {
    if (const NamedArray* s = find("opt/step")) opt.set_step_count(static_cast<std::uint64_t>(s->value[0]));
    for (const auto& e : entries_) {
        std::string_view n(e.name);
        if (!n.starts_with("opt/m/")) continue;
        const std::string pname(n.substr(6));
        const NamedArray* v = find("opt/v/" + pname);
        if (!v) throw ConfigError("checkpoint has first moment but no second moment for '" + pname + "'");
        opt.set_moments(pname, Moments{e.value, v->value});
    }
}

namespace {

template <typename T>
void put_le(std::vector<unsigned char>& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::vector<unsigned char>& b) : bytes_(b) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
    }
    const std::vector<unsigned char>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<unsigned char> out{'I', 'T', 'A', 'G'};
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, ckpt.entries().size());
    for (const auto& e : ckpt.entries()) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
        put_le<std::uint64_t>(out, 2);
        put_le<std::uint64_t>(out, e.value.rows);
        put_le<std::uint64_t>(out, e.value.cols);
        if (e.dtype == DType::F32) {
            for (double v : e.value.data) put_le<float>(out, static_cast<float>(v));
        } else {
            for (double v : e.value.data) put_le<double>(out, v);
        }
    }
    return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
    Reader r(bytes);
    if (r.get_string(4) != "ITAG") throw IoError("not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto count = r.get<std::uint64_t>();
    Checkpoint ck;
    for (std::uint64_t k = 0; k < count; ++k) {
        const auto len = r.get<std::uint32_t>();
        std::string name = r.get_string(len);
        const auto tag = r.get<std::uint8_t>();
        if (tag > 1) throw IoError("unknown dtype tag in record '" + name + "'");
        const auto rank = r.get<std::uint64_t>();
        if (rank > 2) throw IoError("rank > 2 in record '" + name + "'");
        std::uint64_t dims[2] = {1, 1};
        for (std::uint64_t d = 0; d < rank; ++d) dims[d + (2 - rank)] = r.get<std::uint64_t>();
        Tensor t(dims[0], dims[1]);
        const DType dtype = static_cast<DType>(tag);
        for (double& v : t.data) v = dtype == DType::F32 ? static_cast<double>(r.get<float>()) : r.get<double>();
        ck.put(std::move(name), std::move(t), dtype);
    }
    if (!r.done()) throw IoError("trailing bytes after checkpoint records");
    return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace instag
