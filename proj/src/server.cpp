#include "dermagan/server.hpp"

#include <httplib.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dermagan/dataset.hpp"
#include "dermagan/generator.hpp"
#include "dermagan/inversion.hpp"
#include "dermagan/metrics.hpp"

namespace dermagan {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::succeeded: return "succeeded";
    case JobStatus::failed: return "failed";
  }
  return "unknown";
}

json JobInfo::to_json() const {
  return {{"id", id},
          {"kind", kind},
          {"status", std::string(dermagan::to_string(status))},
          {"result", result},
          {"error", error.empty() ? json(nullptr) : json(error)},
          {"submitted_at", submitted_at},
          {"finished_at", finished_at.empty() ? json(nullptr) : json(finished_at)}};
}

JobRunner::JobRunner() : worker_([this] { loop(); }) {}

JobRunner::~JobRunner() {
  {
    std::lock_guard lock(mutex_);
    stopping_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

std::string JobRunner::submit(std::string kind, std::function<json()> work) {
  std::lock_guard lock(mutex_);
  const std::string id = "job-" + std::to_string(next_id_++);
  jobs_[id] = JobInfo{id, std::move(kind), JobStatus::queued, nullptr, "", utc_timestamp(), ""};
  queue_.emplace_back(id, std::move(work));
  cv_.notify_all();
  return id;
}

std::optional<JobInfo> JobRunner::status(const std::string& id) const {
  std::lock_guard lock(mutex_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

JobInfo JobRunner::wait(const std::string& id) const {
  std::unique_lock lock(mutex_);
  if (!jobs_.count(id)) throw InvalidArgument("unknown job '" + id + "'");
  cv_.wait(lock, [&] {
    const auto s = jobs_.at(id).status;
    return s == JobStatus::succeeded || s == JobStatus::failed;
  });
  return jobs_.at(id);
}

void JobRunner::loop() {
  for (;;) {
    std::pair<std::string, std::function<json()>> job;
    {
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      job = std::move(queue_.front());
      queue_.pop_front();
      jobs_[job.first].status = JobStatus::running;
    }
    json result;
    std::string error;
    try {
      result = job.second();
    } catch (const std::exception& e) {
      error = e.what();
    }
    {
      std::lock_guard lock(mutex_);
      auto& info = jobs_[job.first];
      info.status = error.empty() ? JobStatus::succeeded : JobStatus::failed;
      info.result = std::move(result);
      info.error = std::move(error);
      info.finished_at = utc_timestamp();
    }
    cv_.notify_all();
  }
}

// ---------------------------------------------------------------------------

namespace {

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, const std::string& message) : std::runtime_error(message), status(status) {}
  int status;
};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

LatentSpace parse_space(const std::string& s) {
  if (s == "Z") return LatentSpace::Z;
  if (s == "W") return LatentSpace::W;
  if (s == "Wplus" || s == "W+") return LatentSpace::Wplus;
  throw InvalidArgument("unknown latent space '" + s + "'");
}

}  // namespace

struct ApiServer::State {
  ArtifactStore& store;
  ServiceOptions options;
  httplib::Server http;
  JobRunner jobs;
  FeatureEmbedder embedder;
  std::mutex model_mutex;  // generator forward passes are serialized

  std::optional<DatasetManifest> manifest;
  std::optional<GanCheckpoint> checkpoint;
  std::string checkpoint_id;
  std::optional<FactorizationResult> factorization;
  std::string factorization_id;
  std::optional<EncoderModel> encoder;
  std::optional<HypernetModel> hypernet;
  std::unique_ptr<CurationState> curation;
  std::map<int, double> rank_scores;

  std::mutex inversion_mutex;
  std::map<std::string, InversionResult> inversions;

  State(ArtifactStore& s, ServiceOptions o) : store(s), options(std::move(o)) { load(); }

  void load() {
    if (auto d = store.latest(ArtifactKind::dataset)) manifest = load_manifest(store.absolute(*d));
    auto ck = options.checkpoint_id ? std::optional(store.get(*options.checkpoint_id))
                                    : store.latest(ArtifactKind::checkpoint);
    if (ck) {
      checkpoint = GanCheckpoint::load(store.absolute(*ck));
      checkpoint_id = ck->id;
    }
    auto fz = options.factorization_id ? std::optional(store.get(*options.factorization_id))
                                       : store.latest(ArtifactKind::factorization);
    if (fz) {
      factorization = FactorizationResult::load(store.absolute(*fz));
      factorization_id = fz->id;
      curation = std::make_unique<CurationState>(store.root() / "curation" / fz->id, fz->id,
                                                 factorization->dim());
      for (const auto& r : store.list(ArtifactKind::report)) {
        if (r.meta.value("type", "") != "direction_rank" || r.meta.value("factorization_id", "") != fz->id)
          continue;
        std::ifstream in(store.absolute(r));
        const auto j = json::parse(in);
        rank_scores.clear();
        for (const auto& e : j.at("ranks")) rank_scores[e.at("index").get<int>()] = e.at("mean_image_change").get<double>();
      }
    }
    if (auto e = store.latest(ArtifactKind::encoder)) encoder = EncoderModel::load(store.absolute(*e));
    if (checkpoint)
      if (auto h = store.latest(ArtifactKind::hypernet))
        hypernet = HypernetModel::load(store.absolute(*h), checkpoint->generator_ema);
  }

  void require_generator() const {
    if (!checkpoint) throw HttpError(503, "no GAN checkpoint in the store");
  }
  void require_factorization() const {
    if (!factorization) throw HttpError(503, "no factorization in the store");
  }

  fs::path inversion_file(const std::string& id) const { return store.root() / "inversions" / (id + ".dgarc"); }

  InversionResult inversion(const std::string& id) {
    if (id.find('/') != std::string::npos || id.find("..") != std::string::npos)
      throw HttpError(400, "malformed inversion id");
    std::lock_guard lock(inversion_mutex);
    if (auto it = inversions.find(id); it != inversions.end()) return it->second;
    const auto file = inversion_file(id);
    if (!fs::exists(file)) throw HttpError(404, "unknown inversion '" + id + "'");
    auto r = InversionResult::load(file);
    inversions[id] = r;
    return r;
  }

  json run_inversion(const std::string& png) {
    require_generator();
    if (!encoder) throw HttpError(503, "no encoder in the store");
    const auto id = "inv-" + hex64(fnv1a(png)) + "-k" + std::to_string(options.inversion_steps);
    {
      std::lock_guard lock(inversion_mutex);
      if (inversions.count(id) || fs::exists(inversion_file(id))) return {{"inversion_id", id}, {"cached", true}};
    }
    auto image = standardize(decode_png(png, id), checkpoint->config.resolution);
    InversionResult r;
    {
      std::lock_guard lock(model_mutex);
      auto G = checkpoint->generator_ema;
      r = invert(image, G, *encoder, hypernet ? &*hypernet : nullptr, options.inversion_steps, embedder);
    }
    r.source_id = id;
    fs::create_directories(store.root() / "inversions");
    r.save(inversion_file(id));
    json trace = json::array();
    for (const auto& p : r.loss_trace) trace.push_back({{"l2", p.l2}, {"lpips", p.lpips}});
    {
      std::lock_guard lock(inversion_mutex);
      inversions[id] = r;
    }
    return {{"inversion_id", id}, {"cached", false}, {"loss_trace", trace}};
  }

  std::string render(const LatentCode& latent, const WeightOffsets& offsets, ImageTensor* out = nullptr) {
    std::lock_guard lock(model_mutex);
    auto G = checkpoint->generator_ema;
    auto img = synthesize(G, latent, NoiseMode::fixed, offsets);
    if (out) *out = img;
    return encode_png(img);
  }

  json directions_json() {
    require_factorization();
    json arr = json::array();
    const auto entries = curation->entries();
    for (int i = 0; i < factorization->dim(); ++i) {
      auto j = entries[i].to_json();
      j["singular_value"] = factorization->singular_values(i);
      j["degenerate"] = static_cast<bool>(factorization->degenerate.at(i));
      auto it = rank_scores.find(i);
      j["rank_score"] = it == rank_scores.end() ? json(nullptr) : json(it->second);
      arr.push_back(std::move(j));
    }
    return {{"factorization_id", factorization_id}, {"checkpoint_id", checkpoint_id}, {"directions", arr}};
  }
};

namespace {

void send_json(httplib::Response& res, const json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

template <class F>
httplib::Server::Handler guarded(F&& f) {
  return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const HttpError& e) {
      send_json(res, {{"error", e.what()}}, e.status);
    } catch (const CurationConflict& e) {
      send_json(res, {{"error", e.what()}}, 409);
    } catch (const InvalidArgument& e) {
      send_json(res, {{"error", e.what()}}, 400);
    } catch (const json::exception& e) {
      send_json(res, {{"error", std::string("malformed JSON: ") + e.what()}}, 400);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    }
  };
}

}  // namespace

ApiServer::ApiServer(ArtifactStore& store, ServiceOptions options)
    : state_(std::make_unique<State>(store, std::move(options))) {
  auto& s = *state_;
  auto& http = s.http;
  // SO_REUSEPORT (the library default) would let a second server share a busy port.
  http.set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  if (s.options.static_dir && !http.set_mount_point("/ui", s.options.static_dir->string()))
    throw IoError("static directory " + s.options.static_dir->string() + " does not exist");

  http.Get("/images", guarded([&s](const httplib::Request& req, httplib::Response& res) {
    if (!s.manifest) throw HttpError(503, "no dataset in the store");
    std::optional<Split> split;
    if (req.has_param("split")) split = parse_split(req.get_param_value("split"));
    json arr = json::array();
    for (std::size_t i = 0; i < s.manifest->entries.size(); ++i) {
      const auto& e = s.manifest->entries[i];
      if (split && e.split != *split) continue;
      arr.push_back({{"index", i},
                     {"path", e.path},
                     {"label", e.label},
                     {"class_name", s.manifest->class_names.at(e.label)},
                     {"split", std::string(to_string(e.split))}});
    }
    send_json(res, {{"images", arr}, {"resolution", s.manifest->resolution}});
  }));

  http.Get(R"(/images/(\d+)\.png)", guarded([&s](const httplib::Request& req, httplib::Response& res) {
    if (!s.manifest) throw HttpError(503, "no dataset in the store");
    const auto i = std::stoul(req.matches[1].str());
    if (i >= s.manifest->entries.size()) throw HttpError(404, "image index out of range");
    res.set_content(encode_png(s.manifest->load_image(s.manifest->entries[i])), "image/png");
  }));

  http.Post("/invert", guarded([&s](const httplib::Request& req, httplib::Response& res) {
    std::string png;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) throw HttpError(400, "multipart upload needs an 'image' part");
      png = req.get_file_value("image").content;
    } else {
      png = req.body;
    }
    if (png.empty()) throw HttpError(400, "empty image upload");
    try {
      decode_png(png);  // reject undecodable uploads before queueing
    } catch (const Error& e) {
      throw HttpError(400, e.what());
    }
    if (req.has_param("async") && req.get_param_value("async") == "1") {
      const auto id = s.jobs.submit("invert", [&s, png] { return s.run_inversion(png); });
      send_json(res, {{"job_id", id}}, 202);
      return;
    }
    send_json(res, s.run_inversion(png));
  }));

  http.Get(R"(/inversions/([^/]+)/reconstruction\.png)",
           guarded([&s](const httplib::Request& req, httplib::Response& res) {
             s.require_generator();
             const auto inv = s.inversion(req.matches[1].str());
             res.set_content(s.render(inv.latent, inv.weight_offsets), "image/png");
           }));

  http.Get("/directions", guarded([&s](const httplib::Request&, httplib::Response& res) {
    send_json(res, s.directions_json());
  }));

  http.Post("/edit", guarded([&s](const httplib::Request& req, httplib::Response& res) {
    s.require_generator();
    s.require_factorization();
    const auto body = json::parse(req.body);
    LatentCode latent;
    WeightOffsets offsets;
    if (body.contains("inversion_id")) {
      const auto inv = s.inversion(body.at("inversion_id").get<std::string>());
      latent = inv.latent;
      offsets = inv.weight_offsets;
    } else if (body.contains("latent")) {
      const auto& l = body.at("latent");
      latent.space = parse_space(l.value("space", "W"));
      const auto values = l.at("values").get<std::vector<double>>();
      const auto d = s.checkpoint->config.latent_dim;
      latent.values = torch::tensor(values, torch::kFloat64);
      if (latent.space == LatentSpace::Wplus) {
        if (values.size() % static_cast<std::size_t>(d) != 0) throw InvalidArgument("latent size mismatch");
        latent.values = latent.values.reshape({-1, d});
      }
      latent.validate();
      if (latent.space == LatentSpace::Z) throw InvalidArgument("edits operate on W or Wplus codes");
    } else {
      throw InvalidArgument("edit needs inversion_id or latent");
    }
    const int index = body.at("direction_index").get<int>();
    if (index < 0 || index >= s.factorization->dim()) throw InvalidArgument("direction_index out of range");
    const double magnitude = body.at("magnitude").get<double>();
    std::optional<LayerRange> range;
    if (body.contains("layer_range") && !body.at("layer_range").is_null()) {
      const auto r = body.at("layer_range").get<std::vector<int>>();
      if (r.size() != 2) throw InvalidArgument("layer_range must be [begin, end)");
      range = LayerRange{r[0], r[1]};
    }
    const auto edited = apply_direction(latent, direction_at(*s.factorization, index), magnitude, range);
    ImageTensor source, result;
    s.render(latent, offsets, &source);
    const auto png = s.render(edited, offsets, &result);
    const double d = lpips(result, source, s.embedder).value;
    res.set_header("X-Lpips-To-Source", std::to_string(d));
    res.set_header("X-Direction-Index", std::to_string(index));
    res.set_content(png, "image/png");
  }));

  http.Post("/curation", guarded([&s](const httplib::Request& req, httplib::Response& res) {
    s.require_factorization();
    const auto update = CurationUpdate::from_json(json::parse(req.body));
    const bool changed = s.curation->apply(update);
    send_json(res, {{"changed", changed}, {"direction", s.curation->entry(update.index).to_json()}});
  }));

  http.Get(R"(/jobs/([^/]+))", guarded([&s](const httplib::Request& req, httplib::Response& res) {
    auto info = s.jobs.status(req.matches[1].str());
    if (!info) throw HttpError(404, "unknown job '" + req.matches[1].str() + "'");
    send_json(res, info->to_json());
  }));

  http.Get("/artifacts", guarded([&s](const httplib::Request&, httplib::Response& res) {
    send_json(res, {{"artifacts", s.store.to_json()}});
  }));
}

ApiServer::~ApiServer() { stop(); }

int ApiServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = state_->http.bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!state_->http.bind_to_port(host, port))
    throw IoError("cannot bind " + host + ":" + std::to_string(port) + " (port busy?)");
  return port;
}

void ApiServer::listen() {
  if (!state_->http.listen_after_bind()) throw IoError("server stopped with an error");
}

void ApiServer::start() {
  thread_ = std::thread([this] { state_->http.listen_after_bind(); });
  state_->http.wait_until_ready();
}

void ApiServer::stop() {
  state_->http.stop();
  if (thread_.joinable()) thread_.join();
}

JobRunner& ApiServer::jobs() { return state_->jobs; }

}  // namespace dermagan
