#include "oarstd/kernels.hpp"

#include <cstdlib>

namespace oarstd::kernels {

#if defined(OARSTD_BUILD_AVX2)
const Backend& avx2_backend();
#endif

namespace {

bool avx2_usable() {
#if defined(OARSTD_BUILD_AVX2) && defined(__GNUC__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Backend* lookup(std::string_view name) {
  if (name == "scalar") return &scalar_backend();
#if defined(OARSTD_BUILD_AVX2)
  if (name == "avx2" && avx2_usable()) return &avx2_backend();
#endif
  return nullptr;
}

const Backend* initial_backend() {
  if (const char* env = std::getenv("OARSTD_BACKEND")) {
    if (const Backend* b = lookup(env)) return b;
  }
#if defined(OARSTD_BUILD_AVX2)
  if (avx2_usable()) return &avx2_backend();
#endif
  return &scalar_backend();
}

const Backend*& active_slot() {
  static const Backend* slot = initial_backend();
  return slot;
}

}  // namespace

const Backend& active() { return *active_slot(); }

bool set_active(std::string_view name) {
  if (const Backend* b = lookup(name)) {
    active_slot() = b;
    return true;
  }
  return false;
}

std::vector<const Backend*> available() {
  std::vector<const Backend*> out{&scalar_backend()};
#if defined(OARSTD_BUILD_AVX2)
  if (avx2_usable()) out.push_back(&avx2_backend());
#endif
  return out;
}

}  // namespace oarstd::kernels
