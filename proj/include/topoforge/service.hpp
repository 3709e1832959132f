#pragma once

// Local HTTP service: problem definition, SIMP and DiT jobs with progress
// streamed as server-sent events, and checkpoint management.
//
//   POST   /api/problems             define a problem, get full-material fields
//   POST   /api/jobs                 start a simp or dit job
//   GET    /api/jobs/{id}            job status
//   GET    /api/jobs/{id}/events     event stream (replays from the start)
//   DELETE /api/jobs/{id}            cancel
//   GET    /api/checkpoints          checkpoint files in the checkpoint dir
//   POST   /api/checkpoints/load     load a checkpoint for dit jobs

#include <memory>
#include <string>
#include <vector>

namespace topoforge::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 7878;  // 0 picks a free port
  std::string checkpoint_dir = ".";
  int queue_width = 2;  // concurrently running jobs
  // Origins allowed for CORS besides any http://localhost:* or http://127.0.0.1:*.
  std::vector<std::string> extra_origins;
};

class DesignService {
 public:
  explicit DesignService(ServiceConfig cfg);
  ~DesignService();
  DesignService(const DesignService&) = delete;
  DesignService& operator=(const DesignService&) = delete;

  // Binds and serves on a background thread; returns the bound port.
  // Throws std::runtime_error when the address cannot be bound.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace topoforge::service
