#include "dnbp/autodiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>

namespace dnbp::ad {
namespace {

class Writer {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
    void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    const std::vector<char>& data() const { return buf_; }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : buf_(std::move(data)) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() { return std::bit_cast<double>(get(8)); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw std::runtime_error("checkpoint truncated");
    }
    std::uint64_t get(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries) {
    Writer w;
    w.bytes(std::string(kCheckpointMagic, 4));
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        const std::size_t n = numel(e.shape);
        if (e.values.size() != n || e.first_moment.size() != n || e.second_moment.size() != n) {
            throw std::invalid_argument("checkpoint entry " + e.name + " does not match shape " + shape_string(e.shape));
        }
        w.u32(static_cast<std::uint32_t>(e.name.size()));
        w.bytes(e.name);
        w.u32(static_cast<std::uint32_t>(e.shape.size()));
        for (auto x : e.shape) w.u64(x);
        for (double v : e.values) w.f64(v);
        for (double v : e.first_moment) w.f64(v);
        for (double v : e.second_moment) w.f64(v);
        w.u64(e.step);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
    if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw std::runtime_error("bad checkpoint magic in " + path.string());
    if (const auto v = r.u32(); v != kCheckpointVersion) {
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(v));
    }
    const std::uint32_t count = r.u32();
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        CheckpointEntry e;
        e.name = r.bytes(r.u32());
        const std::uint32_t rank = r.u32();
        for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(static_cast<std::size_t>(r.u64()));
        const std::size_t n = numel(e.shape);
        for (auto* vec : {&e.values, &e.first_moment, &e.second_moment}) {
            vec->resize(n);
            for (auto& v : *vec) v = r.f64();
        }
        e.step = r.u64();
        entries.push_back(std::move(e));
    }
    if (!r.done()) throw std::runtime_error("trailing bytes in checkpoint " + path.string());
    return entries;
}

std::vector<CheckpointEntry> to_entries(std::span<const ParameterBlock* const> blocks) {
    std::vector<CheckpointEntry> out;
    for (const auto* b : blocks) {
        for (const auto& p : b->tensors) {
            out.push_back({b->name + "/" + p.name, p.shape, p.value, p.first_moment, p.second_moment, b->step});
        }
    }
    return out;
}

void load_entries(std::span<ParameterBlock* const> blocks, std::span<const CheckpointEntry> entries) {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (auto* b : blocks) {
        for (auto& p : b->tensors) {
            const std::string key = b->name + "/" + p.name;
            auto it = by_name.find(key);
            if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor " + key);
            const auto& e = *it->second;
            if (e.shape != p.shape) {
                throw std::runtime_error("checkpoint tensor " + key + " has shape " + shape_string(e.shape) +
                                         ", expected " + shape_string(p.shape));
            }
            p.value = e.values;
            p.first_moment = e.first_moment;
            p.second_moment = e.second_moment;
            p.zero_grad();
            b->step = e.step;
        }
    }
}

CheckpointEntry value_entry(std::string name, Shape shape, std::vector<double> values) {
    const std::size_t n = values.size();
    return {std::move(name), std::move(shape), std::move(values), std::vector<double>(n, 0.0),
            std::vector<double>(n, 0.0), 0};
}

}  // namespace dnbp::ad
