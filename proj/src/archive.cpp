#include "revbd/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "revbd/errors.hpp"
#include "revbd/hashing.hpp"

namespace revbd {

namespace {

constexpr char kMagic[8] = {'R', 'V', 'B', 'D', 'A', 'R', 'C', 'H'};
constexpr std::size_t kDigestChars = 64;

enum : std::uint8_t { kText = 1, kF32 = 2, kI64 = 3 };

class Writer {
public:
    template <typename T>
    void put_le(T value) {
        using U = std::make_unsigned_t<T>;
        auto u = static_cast<U>(value);
        for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
    void put_bytes(const void* data, std::size_t n) {
        auto p = static_cast<const std::uint8_t*>(data);
        bytes_.insert(bytes_.end(), p, p + n);
    }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get_le() {
        need(sizeof(T));
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<decltype(u)>(bytes_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(u);
    }
    std::span<const std::uint8_t> get_bytes(std::size_t n) {
        need(n);
        auto out = bytes_.subspan(pos_, n);
        pos_ += n;
        return out;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (n > bytes_.size() - pos_) throw FormatError("archive truncated");
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

void ArrayArchive::put_text(const std::string& name, std::string text) {
    for (auto& e : entries_) {
        if (e.name == name) {
            e.value = std::move(text);
            return;
        }
    }
    entries_.push_back({name, std::move(text)});
}

void ArrayArchive::put_tensor(const std::string& name, const torch::Tensor& tensor) {
    auto stored = tensor.detach().cpu().contiguous();
    stored = stored.is_floating_point() ? stored.to(torch::kFloat).clone() : stored.to(torch::kLong).clone();
    for (auto& e : entries_) {
        if (e.name == name) {
            e.value = stored;
            return;
        }
    }
    entries_.push_back({name, stored});
}

bool ArrayArchive::contains(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return true;
    }
    return false;
}

const ArrayArchive::Entry& ArrayArchive::find(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return e;
    }
    throw FormatError("archive has no entry '" + name + "'");
}

const std::string& ArrayArchive::text(const std::string& name) const {
    const auto& e = find(name);
    if (!std::holds_alternative<std::string>(e.value)) throw FormatError("entry '" + name + "' is not text");
    return std::get<std::string>(e.value);
}

torch::Tensor ArrayArchive::tensor(const std::string& name) const {
    const auto& e = find(name);
    if (!std::holds_alternative<torch::Tensor>(e.value)) throw FormatError("entry '" + name + "' is not an array");
    return std::get<torch::Tensor>(e.value).clone();
}

std::vector<std::string> ArrayArchive::names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_) out.push_back(e.name);
    return out;
}

std::vector<std::string> ArrayArchive::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& e : entries_) {
        if (e.name.starts_with(prefix)) out.push_back(e.name);
    }
    return out;
}

std::vector<std::uint8_t> ArrayArchive::serialize() const {
    Writer w;
    w.put_bytes(kMagic, sizeof(kMagic));
    w.put_le<std::uint32_t>(kFormatVersion);
    w.put_le<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        w.put_le<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
        w.put_bytes(e.name.data(), e.name.size());
        if (const auto* s = std::get_if<std::string>(&e.value)) {
            w.put_le<std::uint8_t>(kText);
            w.put_le<std::uint64_t>(s->size());
            w.put_bytes(s->data(), s->size());
            continue;
        }
        const auto& t = std::get<torch::Tensor>(e.value);
        const bool is_float = t.scalar_type() == torch::kFloat;
        w.put_le<std::uint8_t>(is_float ? kF32 : kI64);
        w.put_le<std::uint32_t>(static_cast<std::uint32_t>(t.dim()));
        for (auto d : t.sizes()) w.put_le<std::uint64_t>(static_cast<std::uint64_t>(d));
        if (is_float) {
            const float* p = t.data_ptr<float>();
            for (std::int64_t i = 0; i < t.numel(); ++i) w.put_le<std::uint32_t>(std::bit_cast<std::uint32_t>(p[i]));
        } else {
            const std::int64_t* p = t.data_ptr<std::int64_t>();
            for (std::int64_t i = 0; i < t.numel(); ++i) w.put_le<std::int64_t>(p[i]);
        }
    }
    const auto digest = sha256_hex(w.bytes());
    w.put_bytes(digest.data(), digest.size());
    return std::move(w.bytes());
}

ArrayArchive ArrayArchive::deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof(kMagic) + 8 + kDigestChars) throw FormatError("archive truncated");
    if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) throw FormatError("not a revbd archive");
    const auto body = bytes.first(bytes.size() - kDigestChars);
    const std::string stored(reinterpret_cast<const char*>(bytes.data() + body.size()), kDigestChars);
    if (sha256_hex(body) != stored) throw FormatError("archive digest mismatch (corrupt or truncated)");

    Reader r(body.subspan(sizeof(kMagic)));
    const auto version = r.get_le<std::uint32_t>();
    if (version != kFormatVersion) {
        throw FormatError("archive format version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kFormatVersion) + ")");
    }
    const auto count = r.get_le<std::uint32_t>();
    ArrayArchive out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get_le<std::uint32_t>();
        auto name_bytes = r.get_bytes(name_len);
        std::string name(name_bytes.begin(), name_bytes.end());
        const auto type = r.get_le<std::uint8_t>();
        if (type == kText) {
            const auto len = r.get_le<std::uint64_t>();
            auto text = r.get_bytes(static_cast<std::size_t>(len));
            out.entries_.push_back({std::move(name), std::string(text.begin(), text.end())});
            continue;
        }
        if (type != kF32 && type != kI64) throw FormatError("unknown entry type in '" + name + "'");
        const auto ndim = r.get_le<std::uint32_t>();
        if (ndim > 8) throw FormatError("implausible rank in '" + name + "'");
        std::vector<std::int64_t> dims(ndim);
        std::int64_t numel = 1;
        for (auto& d : dims) {
            d = static_cast<std::int64_t>(r.get_le<std::uint64_t>());
            if (d < 0 || d > (std::int64_t{1} << 40)) throw FormatError("implausible dimension in '" + name + "'");
            numel *= d;
        }
        torch::Tensor t;
        if (type == kF32) {
            t = torch::empty(dims, torch::kFloat);
            float* p = t.data_ptr<float>();
            for (std::int64_t k = 0; k < numel; ++k) p[k] = std::bit_cast<float>(r.get_le<std::uint32_t>());
        } else {
            t = torch::empty(dims, torch::kLong);
            std::int64_t* p = t.data_ptr<std::int64_t>();
            for (std::int64_t k = 0; k < numel; ++k) p[k] = r.get_le<std::int64_t>();
        }
        out.entries_.push_back({std::move(name), t});
    }
    if (!r.done()) throw FormatError("trailing bytes after last archive entry");
    return out;
}

void ArrayArchive::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

ArrayArchive ArrayArchive::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path.string());
}

}  // namespace revbd
