#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "bya/autodiff.hpp"

namespace bya {

/// Parameter groups a training stage freezes or unfreezes.
namespace group {
inline constexpr const char* kDit = "dit";
inline constexpr const char* kText = "text";
inline constexpr const char* kFaceEncoder = "face_encoder";
inline constexpr const char* kFaceXattn = "face_xattn";
inline constexpr const char* kAudioEncoder = "audio_encoder";
inline constexpr const char* kAudioXattn = "audio_xattn";
inline constexpr const char* kLora = "lora";
inline constexpr const char* kRouter = "router";
}  // namespace group

/// Owns every parameter of a model. Addresses are stable for the lifetime of
/// the store, so modules keep raw pointers into it.
template <typename S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<S>& add(const std::string& name, const std::string& group, Matrix<S> init);
  Parameter<S>& at(const std::string& name);
  const Parameter<S>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter<S>*> all();
  std::vector<const Parameter<S>*> all() const;
  std::vector<Parameter<S>*> in_group(const std::string& group);

  void zero_grads();
  /// Mark exactly the listed groups trainable.
  void set_trainable(const std::vector<std::string>& groups);
  std::size_t count() const;

  /// Copy values from another store with identical names and shapes.
  template <typename T>
  void copy_values_from(const ParamStore<T>& other) {
    for (const auto& p : params_) p->value = other.at(p->name).value.template cast<S>();
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Checkpoint directory: one BYAT f32 tensor per parameter plus params.json
/// (name -> shape, role, frozen) and an optional free-form metadata object.
template <typename S>
void save_checkpoint(const ParamStore<S>& store, const std::filesystem::path& dir, const std::string& meta_json = "{}");
/// Load values into an already-built store; every stored name must exist with
/// a matching shape.
template <typename S>
void load_checkpoint(ParamStore<S>& store, const std::filesystem::path& dir);
std::string read_checkpoint_meta(const std::filesystem::path& dir);

/// Gaussian matrix with the given std.
template <typename S>
Matrix<S> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

}  // namespace bya
