#include <dlfcn.h>

#include <fstream>

#include "asa/builtin_models.hpp"
#include "asa/engine.hpp"

namespace asa {

namespace {

std::string key_of(const std::string& name, const std::string& version) { return name + "/" + version; }

// Owns the dlopen handle; every behavior created from the library keeps it alive.
struct Library {
  void* handle = nullptr;
  using Create = ModelBehavior* (*)();
  using Destroy = void (*)(ModelBehavior*);
  Create create = nullptr;
  Destroy destroy = nullptr;
  ~Library() {
    if (handle != nullptr) dlclose(handle);
  }
};

std::shared_ptr<Library> open_library(const std::filesystem::path& artifact) {
  auto lib = std::make_shared<Library>();
  lib->handle = dlopen(artifact.c_str(), RTLD_NOW | RTLD_LOCAL);
  if (lib->handle == nullptr) {
    const char* err = dlerror();
    throw LoadError("ArtifactUnloadable", artifact.string() + ": " + (err ? err : "dlopen failed"));
  }
  using Abi = int (*)();
  auto abi = reinterpret_cast<Abi>(dlsym(lib->handle, "asa_extension_abi_version"));
  lib->create = reinterpret_cast<Library::Create>(dlsym(lib->handle, "asa_extension_create"));
  lib->destroy = reinterpret_cast<Library::Destroy>(dlsym(lib->handle, "asa_extension_destroy"));
  if (abi == nullptr || lib->create == nullptr || lib->destroy == nullptr) {
    throw LoadError("ArtifactUnloadable", artifact.string() + ": missing extension entry points");
  }
  if (abi() != kExtensionAbiVersion) {
    throw LoadError("ArtifactUnloadable", artifact.string() + ": ABI version " + std::to_string(abi()) +
                                              ", host expects " + std::to_string(kExtensionAbiVersion));
  }
  return lib;
}

ModelManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("ManifestInvalid", path.string() + ": cannot read");
  try {
    return Json::parse(in).get<ModelManifest>();
  } catch (const std::exception& e) {
    throw LoadError("ManifestInvalid", path.string() + ": " + e.what());
  }
}

}  // namespace

ModelRegistry ModelRegistry::with_builtins() {
  ModelRegistry r;
  builtin::register_all(r);
  return r;
}

void ModelRegistry::add(ModelManifest manifest, BehaviorFactory factory, bool builtin) {
  const auto problems = manifest_problems(manifest);
  if (!problems.empty()) throw LoadError("ManifestInvalid", manifest.qualified_name() + ": " + problems.front());
  if (!builtin && is_builtin(manifest.name)) {
    throw LoadError("DuplicateModel", "'" + manifest.name + "' is a built-in model");
  }
  const std::string key = key_of(manifest.name, manifest.version);
  if (entries_.count(key)) throw LoadError("DuplicateModel", key + " already registered");
  entries_.emplace(key, Entry{std::move(manifest), std::move(factory), builtin});
}

void ModelRegistry::register_extension(const std::filesystem::path& artifact, const std::filesystem::path& manifest) {
  ModelManifest m = read_manifest(manifest);
  const auto problems = manifest_problems(m);
  if (!problems.empty()) throw LoadError("ManifestInvalid", manifest.string() + ": " + problems.front());
  if (is_builtin(m.name)) throw LoadError("DuplicateModel", "'" + m.name + "' is a built-in model");
  if (entries_.count(key_of(m.name, m.version))) throw LoadError("DuplicateModel", m.qualified_name() + " already registered");
  auto lib = open_library(artifact);
  m.artifact = artifact.string();
  add(std::move(m), [lib]() -> BehaviorPtr {
    ModelBehavior* raw = lib->create();
    if (raw == nullptr) throw Error("ModelFailed", "extension factory returned null");
    return BehaviorPtr(raw, [lib](ModelBehavior* p) { lib->destroy(p); });
  });
}

std::vector<std::string> ModelRegistry::load_extension_dir(const std::filesystem::path& dir) {
  std::vector<std::string> failures;
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) return failures;
  std::vector<std::filesystem::path> manifests;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec)) {
    if (e.path().extension() == ".json") manifests.push_back(e.path());
  }
  std::sort(manifests.begin(), manifests.end());
  for (const auto& mpath : manifests) {
    try {
      std::filesystem::path artifact;
      std::ifstream in(mpath);
      Json raw = Json::parse(in, nullptr, false);
      if (raw.is_object() && raw.contains("artifact") && raw["artifact"].is_string()) {
        artifact = dir / raw["artifact"].get<std::string>();
      } else {
        const auto stem = mpath.stem().string();
        artifact = std::filesystem::exists(dir / ("lib" + stem + ".so")) ? dir / ("lib" + stem + ".so")
                                                                           : dir / (stem + ".so");
      }
      register_extension(artifact, mpath);
    } catch (const Error& e) {
      failures.push_back(mpath.filename().string() + ": " + e.code() + ": " + e.what());
    }
  }
  return failures;
}

const ModelManifest* ModelRegistry::find(const std::string& name, const std::string& version) const {
  auto it = entries_.find(key_of(name, version));
  return it == entries_.end() ? nullptr : &it->second.manifest;
}

bool ModelRegistry::contains_name(const std::string& name) const {
  for (const auto& [_, e] : entries_) {
    if (e.manifest.name == name) return true;
  }
  return false;
}

bool ModelRegistry::is_builtin(const std::string& name) const {
  for (const auto& [_, e] : entries_) {
    if (e.builtin && e.manifest.name == name) return true;
  }
  return false;
}

BehaviorPtr ModelRegistry::create(const std::string& name, const std::string& version) const {
  auto it = entries_.find(key_of(name, version));
  if (it == entries_.end()) throw Error("UnknownModel", "unknown model " + key_of(name, version));
  return it->second.factory();
}

std::vector<ModelManifest> ModelRegistry::manifests() const {
  std::vector<ModelManifest> out;
  for (const auto& [_, e] : entries_) out.push_back(e.manifest);
  return out;
}

}  // namespace asa
