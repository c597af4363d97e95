#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dnbp/autodiff/parameter.hpp"

namespace dnbp::ad {

inline constexpr char kCheckpointMagic[4] = {'D', 'N', 'B', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// One named tensor in the container. Tensors that carry no optimizer state
// (particle dumps) store zero moments and step 0.
struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::uint64_t step = 0;
};

// Layout (all integers and doubles little-endian):
//   "DNBP" | u32 version | u32 entry count |
//   per entry: u32 name bytes, name (UTF-8) | u32 rank, u64 extents[rank] |
//              f64 values[n] | f64 first_moment[n] | f64 second_moment[n] | u64 step
void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

// Entries are named "<block>/<tensor>".
std::vector<CheckpointEntry> to_entries(std::span<const ParameterBlock* const> blocks);
// Overwrites matching tensors; every tensor of every block must be present
// with an identical shape.
void load_entries(std::span<ParameterBlock* const> blocks, std::span<const CheckpointEntry> entries);

CheckpointEntry value_entry(std::string name, Shape shape, std::vector<double> values);

}  // namespace dnbp::ad
