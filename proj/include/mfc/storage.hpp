#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

namespace mfc {

/// Process-wide RAM budget per LevelStore instance, in bytes.  Stores whose
/// total payload fits the budget stay in memory; larger ones spill whole
/// levels to an unlinked temporary file and cache the working set.  Override
/// with the MFC_STORE_MB environment variable (read once, at first use).
std::size_t store_ram_budget();
void set_store_ram_budget(std::size_t bytes);

/// A sequence of double arrays ("levels") of fixed, heterogeneous sizes with
/// pin/unpin access.  Backward and forward sweeps touch adjacent levels, so
/// the cache holds only a few levels at a time in spill mode.
///
/// Pin discipline: pin() loads the level (from cache or disk) and keeps it
/// resident until the matching unpin(); pin_overwrite() skips the load for
/// levels about to be fully rewritten.  Writers must call mark_dirty() (or
/// use pin_overwrite) so evictions write the level back.
class LevelStore {
 public:
  LevelStore() = default;
  LevelStore(std::vector<std::size_t> level_doubles, std::size_t ram_budget_bytes);
  LevelStore(LevelStore&& other) noexcept;
  LevelStore& operator=(LevelStore&& other) noexcept;
  LevelStore(const LevelStore&) = delete;
  LevelStore& operator=(const LevelStore&) = delete;
  ~LevelStore();

  int levels() const { return static_cast<int>(sizes_.size()); }
  std::size_t level_doubles(int k) const { return sizes_[static_cast<std::size_t>(k)]; }
  bool spilled() const { return fd_ >= 0; }

  double* pin(int k);
  double* pin_overwrite(int k);
  void mark_dirty(int k);
  void unpin(int k);

  /// RAII pin.
  class Pin {
   public:
    Pin(LevelStore& store, int k, bool overwrite = false)
        : store_(&store), k_(k),
          data_(overwrite ? store.pin_overwrite(k) : store.pin(k)) {}
    Pin(const Pin&) = delete;
    Pin& operator=(const Pin&) = delete;
    Pin(Pin&& other) noexcept : store_(other.store_), k_(other.k_), data_(other.data_) {
      other.store_ = nullptr;
    }
    ~Pin() {
      if (store_) store_->unpin(k_);
    }
    double* data() const { return data_; }
    void mark_dirty() { store_->mark_dirty(k_); }

   private:
    LevelStore* store_;
    int k_;
    double* data_;
  };

 private:
  struct Slot {
    std::vector<double> data;
    int pins = 0;
    bool dirty = false;
    bool loaded = false;
    std::uint64_t last_use = 0;
  };

  void ensure_loaded(Slot& slot, int k, bool load_from_disk);
  void evict_over_budget();

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;  // in doubles, within the backing file
  std::vector<Slot> slots_;
  std::size_t budget_doubles_ = 0;
  std::size_t resident_doubles_ = 0;
  std::uint64_t clock_ = 0;
  int fd_ = -1;
};

}  // namespace mfc
