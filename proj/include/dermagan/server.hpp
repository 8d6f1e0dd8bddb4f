#pragma once

// HTTP/JSON API over an artifact store, plus a single-worker job runner for
// work that must not run inside request handlers.

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "dermagan/store.hpp"

namespace dermagan {

enum class JobStatus { queued, running, succeeded, failed };

std::string_view to_string(JobStatus s);

struct JobInfo {
  std::string id;
  std::string kind;
  JobStatus status = JobStatus::queued;
  nlohmann::json result;
  std::string error;
  std::string submitted_at;
  std::string finished_at;

  [[nodiscard]] nlohmann::json to_json() const;
};

/// Runs submitted jobs one at a time, in submission order, on a background
/// thread. Pending jobs are abandoned when the runner is destroyed.
class JobRunner {
 public:
  JobRunner();
  ~JobRunner();
  JobRunner(const JobRunner&) = delete;
  JobRunner& operator=(const JobRunner&) = delete;

  std::string submit(std::string kind, std::function<nlohmann::json()> work);
  [[nodiscard]] std::optional<JobInfo> status(const std::string& id) const;
  /// Blocks until the job leaves the queued/running states.
  JobInfo wait(const std::string& id) const;

 private:
  void loop();

  mutable std::mutex mutex_;
  mutable std::condition_variable cv_;
  std::map<std::string, JobInfo> jobs_;
  std::deque<std::pair<std::string, std::function<nlohmann::json()>>> queue_;
  std::uint64_t next_id_ = 1;
  bool stopping_ = false;
  std::thread worker_;
};

struct ServiceOptions {
  int inversion_steps = 5;
  std::optional<std::string> checkpoint_id;     // defaults to the latest
  std::optional<std::string> factorization_id;  // defaults to the latest
  std::optional<std::filesystem::path> static_dir;
};

/// Endpoints:
///   GET  /images?split=train|val|test     dataset entries
///   GET  /images/{i}.png                  one dataset image
///   POST /invert                          PNG body or multipart "image"
///                                         (?async=1 returns a job id)
///   GET  /inversions/{id}/reconstruction.png
///   GET  /directions                      factorization + curation state
///   POST /edit                            PNG; X-Lpips-To-Source header
///   POST /curation                        {index, status, name, duplicate_of}
///   GET  /jobs/{id}
///   GET  /artifacts
class ApiServer {
 public:
  explicit ApiServer(ArtifactStore& store, ServiceOptions options = {});
  ~ApiServer();
  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Binds the listening socket; port 0 picks a free port. Returns the port.
  /// Throws IoError when the port is busy.
  int bind(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void listen();
  /// Serves on a background thread.
  void start();
  void stop();

  JobRunner& jobs();

 private:
  struct State;
  std::unique_ptr<State> state_;
  std::thread thread_;
};

}  // namespace dermagan
