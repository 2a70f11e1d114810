#pragma once

#include <cstdint>
#include <cstring>
#include <string_view>

#include <torch/torch.h>

namespace rdfcil {

// 64-bit FNV-1a. Used for config hashes and parameter fingerprints; not a
// cryptographic digest.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(const torch::Tensor& t) {
    auto c = t.detach().contiguous().cpu();
    update(c.data_ptr(), static_cast<std::size_t>(c.numel()) * c.element_size());
  }
  std::uint64_t digest() const noexcept { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

// Byte-level fingerprint over every parameter and buffer, in registration order.
inline std::uint64_t fingerprint(const torch::nn::Module& m) {
  Fnv1a h;
  for (const auto& p : m.named_parameters(true)) {
    h.update(p.key());
    h.update(p.value());
  }
  for (const auto& b : m.named_buffers(true)) {
    h.update(b.key());
    h.update(b.value());
  }
  return h.digest();
}

}  // namespace rdfcil
