#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace refgen {

class Sha256 {
public:
    Sha256();
    void update(const void* data, size_t len);
    void update(std::string_view s) { update(s.data(), s.size()); }
    // Hex digest; finalizes, object must not be reused afterwards.
    std::string hex();

private:
    void process_block(const uint8_t* block);

    uint32_t h_[8];
    uint8_t buf_[64];
    size_t buf_len_ = 0;
    uint64_t total_ = 0;
};

std::string sha256_hex(std::string_view data);
std::string sha256_file_hex(const std::string& path);  // throws on IO failure

}  // namespace refgen
