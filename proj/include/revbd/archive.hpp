#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <torch/torch.h>

namespace revbd {

/// Named text blobs and typed arrays in one portable byte stream.
///
/// Layout (all integers little-endian):
///   "RVBDARCH" | u32 format_version | u32 entry_count | entries... | 64-char hex SHA-256
/// Entry: u32 name_len | name | u8 type (1 text, 2 f32 array, 3 i64 array) | payload
///   text:  u64 byte_len | bytes
///   array: u32 ndim | u64 dims[ndim] | elements (f32 or i64, little-endian)
/// The digest covers every byte before it.
class ArrayArchive {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    void put_text(const std::string& name, std::string text);
    /// Float tensors are stored as f32, integer tensors as i64.
    void put_tensor(const std::string& name, const torch::Tensor& tensor);

    bool contains(const std::string& name) const;
    const std::string& text(const std::string& name) const;
    torch::Tensor tensor(const std::string& name) const;
    std::vector<std::string> names() const;
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;

    std::vector<std::uint8_t> serialize() const;
    /// Throws FormatError on bad magic, version, digest, or truncation.
    static ArrayArchive deserialize(std::span<const std::uint8_t> bytes);

    void save(const std::filesystem::path& path) const;
    static ArrayArchive load(const std::filesystem::path& path);

private:
    struct Entry {
        std::string name;
        std::variant<std::string, torch::Tensor> value;
    };
    const Entry& find(const std::string& name) const;

    std::vector<Entry> entries_;
};

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace revbd
