#include "elytra/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "elytra/error.hpp"

namespace elytra {

namespace fs = std::filesystem;

namespace {

std::string to_hex(const unsigned char *digest, unsigned int len) {
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) {
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    }
    return os.str();
}

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) {
            throw Error("crypto", "SHA-256 initialisation failed");
        }
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256 &) = delete;
    Sha256 &operator=(const Sha256 &) = delete;

    void update(const void *data, std::size_t len) { EVP_DigestUpdate(ctx_, data, len); }
    std::string hex() {
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, digest, &len);
        return to_hex(digest, len);
    }

private:
    EVP_MD_CTX *ctx_;
};

static_assert(sizeof(float) == 4);

std::vector<std::uint8_t> to_le_bytes(std::span<const float> values) {
    std::vector<std::uint8_t> bytes(values.size() * 4);
    std::memcpy(bytes.data(), values.data(), bytes.size());
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < bytes.size(); i += 4) {
            std::swap(bytes[i], bytes[i + 3]);
            std::swap(bytes[i + 1], bytes[i + 2]);
        }
    }
    return bytes;
}

} // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_hex(const std::string &text) {
    Sha256 h;
    h.update(text.data(), text.size());
    return h.hex();
}

std::string sha256_floats(std::span<const float> values) {
    const auto bytes = to_le_bytes(values);
    return sha256_hex(bytes);
}

std::string sha256_file(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingArtifactError("cannot open " + path.string());
    }
    Sha256 h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        h.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

void write_f32_blob(const fs::path &path, std::span<const float> values) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const auto bytes = to_le_bytes(values);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<float> read_f32_blob(const fs::path &path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) {
        throw MissingArtifactError("cannot open blob " + path.string());
    }
    const auto size = static_cast<std::size_t>(in.tellg());
    if (size % 4 != 0) {
        throw FormatError("blob " + path.string() + " is truncated (" + std::to_string(size) + " bytes)");
    }
    in.seekg(0);
    std::vector<std::uint8_t> bytes(size);
    in.read(reinterpret_cast<char *>(bytes.data()), static_cast<std::streamsize>(size));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < bytes.size(); i += 4) {
            std::swap(bytes[i], bytes[i + 3]);
            std::swap(bytes[i + 1], bytes[i + 2]);
        }
    }
    std::vector<float> values(size / 4);
    std::memcpy(values.data(), bytes.data(), size);
    return values;
}

Json read_json(const fs::path &path) {
    std::ifstream in(path);
    if (!in) {
        throw MissingArtifactError("cannot open " + path.string());
    }
    try {
        return Json::parse(in);
    } catch (const Json::exception &e) {
        throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_json(const fs::path &path, const Json &doc) { write_text(path, doc.dump(2) + "\n"); }

void write_text(const fs::path &path, const std::string &text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << text;
}

std::string read_text(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw MissingArtifactError("cannot open " + path.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

} // namespace elytra
