#include "bya/params.hpp"

#include <algorithm>
#include <fstream>
#include <json.hpp>

#include "bya/tensor_store.hpp"

namespace bya {

template <typename S>
Parameter<S>& ParamStore<S>::add(const std::string& name, const std::string& group, Matrix<S> init) {
  if (index_.count(name) != 0) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<S>>();
  p->name = name;
  p->group = group;
  p->value = std::move(init);
  p->zero_grad();
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename S>
Parameter<S>& ParamStore<S>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename S>
const Parameter<S>& ParamStore<S>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename S>
std::vector<Parameter<S>*> ParamStore<S>::all() {
  std::vector<Parameter<S>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename S>
std::vector<const Parameter<S>*> ParamStore<S>::all() const {
  std::vector<const Parameter<S>*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename S>
std::vector<Parameter<S>*> ParamStore<S>::in_group(const std::string& group) {
  std::vector<Parameter<S>*> out;
  for (auto& p : params_)
    if (p->group == group) out.push_back(p.get());
  return out;
}

template <typename S>
void ParamStore<S>::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

template <typename S>
void ParamStore<S>::set_trainable(const std::vector<std::string>& groups) {
  for (auto& p : params_) p->trainable = std::find(groups.begin(), groups.end(), p->group) != groups.end();
}

template <typename S>
std::size_t ParamStore<S>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <typename S>
void save_checkpoint(const ParamStore<S>& store, const std::filesystem::path& dir, const std::string& meta_json) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "bya-checkpoint";
  manifest["version"] = 1;
  manifest["meta"] = nlohmann::ordered_json::parse(meta_json);
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const Parameter<S>* p : store.all()) {
    std::vector<float> values(static_cast<std::size_t>(p->value.size()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) values[static_cast<std::size_t>(i)] = static_cast<float>(p->value.data()[i]);
    const std::string file = p->name + ".byat";
    write_tensor(Tensor({static_cast<std::size_t>(p->value.rows()), static_cast<std::size_t>(p->value.cols())}, std::move(values)),
                 dir / file);
    entries.push_back({{"name", p->name},
                       {"file", file},
                       {"shape", {p->value.rows(), p->value.cols()}},
                       {"role", p->group},
                       {"frozen", !p->trainable}});
  }
  manifest["params"] = entries;
  std::ofstream out(dir / "params.json");
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

std::string read_checkpoint_meta(const std::filesystem::path& dir) {
  std::ifstream in(dir / "params.json");
  if (!in) throw IoError("missing checkpoint manifest: " + (dir / "params.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  return manifest.value("meta", nlohmann::json::object()).dump();
}

template <typename S>
void load_checkpoint(ParamStore<S>& store, const std::filesystem::path& dir) {
  std::ifstream in(dir / "params.json");
  if (!in) throw IoError("missing checkpoint manifest: " + (dir / "params.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    if (!store.contains(name)) throw FormatError("checkpoint parameter not in model: " + name);
    Parameter<S>& p = store.at(name);
    const Tensor t = read_tensor(dir / entry.at("file").get<std::string>());
    if (t.rank() != 2 || static_cast<Eigen::Index>(t.dim(0)) != p.value.rows() ||
        static_cast<Eigen::Index>(t.dim(1)) != p.value.cols())
      throw FormatError("checkpoint shape mismatch for " + name);
    const auto data = t.f32();
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(data[static_cast<std::size_t>(i)]);
  }
}

template <typename S>
Matrix<S> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

template class ParamStore<float>;
template class ParamStore<double>;
template void save_checkpoint(const ParamStore<float>&, const std::filesystem::path&, const std::string&);
template void save_checkpoint(const ParamStore<double>&, const std::filesystem::path&, const std::string&);
template void load_checkpoint(ParamStore<float>&, const std::filesystem::path&);
template void load_checkpoint(ParamStore<double>&, const std::filesystem::path&);
template Matrix<float> random_normal(Eigen::Index, Eigen::Index, double, std::mt19937_64&);
template Matrix<double> random_normal(Eigen::Index, Eigen::Index, double, std::mt19937_64&);

}  // namespace bya
