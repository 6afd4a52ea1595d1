#include "mfc/storage.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <string>

#include "mfc/errors.hpp"

namespace mfc {

namespace {
std::atomic<std::size_t> g_budget{0};  // 0 = uninitialized

std::size_t default_budget() {
  if (const char* env = std::getenv("MFC_STORE_MB")) {
    const long mb = std::atol(env);
    if (mb > 0) return static_cast<std::size_t>(mb) * (1u << 20);
  }
  return std::size_t(700) << 20;  // 700 MB
}
}  // namespace

std::size_t store_ram_budget() {
  std::size_t b = g_budget.load(std::memory_order_relaxed);
  if (b == 0) {
    b = default_budget();
    g_budget.store(b, std::memory_order_relaxed);
  }
  return b;
}

void set_store_ram_budget(std::size_t bytes) {
  g_budget.store(bytes, std::memory_order_relaxed);
}

LevelStore::LevelStore(std::vector<std::size_t> level_doubles, std::size_t ram_budget_bytes)
    : sizes_(std::move(level_doubles)) {
  offsets_.resize(sizes_.size());
  slots_.resize(sizes_.size());
  std::size_t total = 0;
  for (std::size_t k = 0; k < sizes_.size(); ++k) {
    offsets_[k] = total;
    total += sizes_[k];
  }
  budget_doubles_ = ram_budget_bytes / sizeof(double);

  if (total <= budget_doubles_) {
    // In-memory mode: allocate everything up front, pins are trivial.
    for (std::size_t k = 0; k < sizes_.size(); ++k) {
      slots_[k].data.assign(sizes_[k], 0.0);
      slots_[k].loaded = true;
    }
    resident_doubles_ = total;
    return;
  }

  const char* dir = std::getenv("TMPDIR");
  std::string path = std::string(dir && *dir ? dir : "/tmp") + "/mfc-spill-XXXXXX";
  std::vector<char> buf(path.begin(), path.end());
  buf.push_back('\0');
  fd_ = ::mkstemp(buf.data());
  if (fd_ < 0) throw NumericalError("level store: cannot create spill file");
  ::unlink(buf.data());
  if (::ftruncate(fd_, static_cast<off_t>(total * sizeof(double))) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw NumericalError("level store: cannot size spill file (disk full?)");
  }
}

LevelStore::LevelStore(LevelStore&& other) noexcept
    : sizes_(std::move(other.sizes_)),
      offsets_(std::move(other.offsets_)),
      slots_(std::move(other.slots_)),
      budget_doubles_(other.budget_doubles_),
      resident_doubles_(other.resident_doubles_),
      clock_(other.clock_),
      fd_(other.fd_) {
  other.fd_ = -1;
  other.slots_.clear();
  other.sizes_.clear();
}

LevelStore& LevelStore::operator=(LevelStore&& other) noexcept {
  if (this != &other) {
    if (fd_ >= 0) ::close(fd_);
    sizes_ = std::move(other.sizes_);
    offsets_ = std::move(other.offsets_);
    slots_ = std::move(other.slots_);
    budget_doubles_ = other.budget_doubles_;
    resident_doubles_ = other.resident_doubles_;
    clock_ = other.clock_;
    fd_ = other.fd_;
    other.fd_ = -1;
    other.slots_.clear();
    other.sizes_.clear();
  }
  return *this;
}

LevelStore::~LevelStore() {
  if (fd_ >= 0) ::close(fd_);
}

void LevelStore::ensure_loaded(Slot& slot, int k, bool load_from_disk) {
  if (slot.loaded) return;
  const std::size_t count = sizes_[static_cast<std::size_t>(k)];
  slot.data.assign(count, 0.0);
  resident_doubles_ += count;
  if (load_from_disk && fd_ >= 0) {
    std::size_t done = 0;
    char* dst = reinterpret_cast<char*>(slot.data.data());
    const std::size_t bytes = count * sizeof(double);
    const off_t base = static_cast<off_t>(offsets_[static_cast<std::size_t>(k)] * sizeof(double));
    while (done < bytes) {
      const ssize_t got = ::pread(fd_, dst + done, bytes - done, base + static_cast<off_t>(done));
      if (got <= 0) throw NumericalError("level store: read failed: " + std::string(std::strerror(errno)));
      done += static_cast<std::size_t>(got);
    }
  }
  slot.loaded = true;
}

void LevelStore::evict_over_budget() {
  if (fd_ < 0) return;
  while (resident_doubles_ > budget_doubles_) {
    int victim = -1;
    std::uint64_t oldest = std::numeric_limits<std::uint64_t>::max();
    for (std::size_t k = 0; k < slots_.size(); ++k) {
      const Slot& s = slots_[k];
      if (s.loaded && s.pins == 0 && s.last_use < oldest) {
        oldest = s.last_use;
        victim = static_cast<int>(k);
      }
    }
    if (victim < 0) return;  // everything resident is pinned; allow overshoot
    Slot& s = slots_[static_cast<std::size_t>(victim)];
    if (s.dirty) {
      const std::size_t bytes = sizes_[static_cast<std::size_t>(victim)] * sizeof(double);
      const char* src = reinterpret_cast<const char*>(s.data.data());
      const off_t base =
          static_cast<off_t>(offsets_[static_cast<std::size_t>(victim)] * sizeof(double));
      std::size_t done = 0;
      while (done < bytes) {
        const ssize_t put =
            ::pwrite(fd_, src + done, bytes - done, base + static_cast<off_t>(done));
        if (put <= 0)
          throw NumericalError("level store: write failed: " + std::string(std::strerror(errno)));
        done += static_cast<std::size_t>(put);
      }
      s.dirty = false;
    }
    resident_doubles_ -= s.data.size();
    s.data = std::vector<double>();
    s.loaded = false;
  }
}

double* LevelStore::pin(int k) {
  Slot& s = slots_[static_cast<std::size_t>(k)];
  ensure_loaded(s, k, true);
  s.pins++;
  s.last_use = ++clock_;
  evict_over_budget();
  return s.data.data();
}

double* LevelStore::pin_overwrite(int k) {
  Slot& s = slots_[static_cast<std::size_t>(k)];
  ensure_loaded(s, k, false);
  s.pins++;
  s.dirty = fd_ >= 0;
  s.last_use = ++clock_;
  evict_over_budget();
  return s.data.data();
}

void LevelStore::mark_dirty(int k) {
  Slot& s = slots_[static_cast<std::size_t>(k)];
  s.dirty = fd_ >= 0;
}

void LevelStore::unpin(int k) {
  Slot& s = slots_[static_cast<std::size_t>(k)];
  if (s.pins <= 0) throw NumericalError("level store: unbalanced unpin");
  s.pins--;
  evict_over_budget();
}

}  // namespace mfc
