#include "topoforge/service.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "topoforge/checkpoint.hpp"
#include "topoforge/diffusion.hpp"
#include "topoforge/dit_sample.hpp"
#include "topoforge/grid_io.hpp"
#include "topoforge/metrics.hpp"
#include "topoforge/rng.hpp"
#include "topoforge/sampler.hpp"
#include "topoforge/simp.hpp"

// After the Eigen-based headers: <resolv.h>, pulled in here, defines a _res macro.
#include <httplib.h>
#undef _res

namespace topoforge::service {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr int kMaxGrid = 256;
constexpr int kMaxProgressGrid = 32;
const std::vector<int> kTestedSteps = {1000, 250, 100, 25, 10, 5};

struct FieldError {
  std::string field, message;
};

// Collects field-level validation failures for a 422 response.
struct Validation {
  std::vector<FieldError> errors;
  void add(std::string field, std::string message) { errors.push_back({std::move(field), std::move(message)}); }
  bool ok() const { return errors.empty(); }
  json to_json() const {
    json arr = json::array();
    for (const auto& e : errors) arr.push_back({{"field", e.field}, {"message", e.message}});
    return {{"error", "validation failed"}, {"errors", arr}};
  }
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

bool is_number(const json& j) { return j.is_number() && std::isfinite(j.get<double>()); }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::string hex16(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// Block average down to at most 32 x 32, quantized to 0..255.
json progress_grid(const std::vector<double>& values, int nx, int ny) {
  const int k = std::max(1, (std::max(nx, ny) + kMaxProgressGrid - 1) / kMaxProgressGrid);
  const int gx = (nx + k - 1) / k, gy = (ny + k - 1) / k;
  std::vector<int> data(static_cast<std::size_t>(gx) * gy);
  for (int r = 0; r < gy; ++r)
    for (int c = 0; c < gx; ++c) {
      double sum = 0;
      int n = 0;
      for (int rr = r * k; rr < std::min(ny, (r + 1) * k); ++rr)
        for (int cc = c * k; cc < std::min(nx, (c + 1) * k); ++cc, ++n) sum += values[rr * nx + cc];
      data[r * gx + c] = static_cast<int>(std::lround(255.0 * std::clamp(sum / n, 0.0, 1.0)));
    }
  return {{"nx", gx}, {"ny", gy}, {"encoding", "u8"}, {"data", data}};
}

json anchor_json(const AnchorSpec& a) {
  if (a.kind == AnchorKind::Segment) return {{"kind", "segment"}, {"from", to_string(a.location)}, {"to", to_string(a.segment_end)}};
  return {{"kind", "point"}, {"site", to_string(a.location)}};
}

struct ProblemEntry {
  std::string id;
  Problem problem;
  fem::ScalarField stress, strain;
};

std::optional<Problem> parse_problem_body(const json& body, Validation& v) {
  if (!body.is_object()) {
    v.add("body", "expected a JSON object");
    return std::nullopt;
  }
  int nx = 64, ny = 64;
  if (body.contains("grid")) {
    const auto& g = body["grid"];
    if (g.is_number_integer()) {
      nx = ny = g.get<int>();
    } else if (g.is_object() && g.value("nx", json()).is_number_integer() && g.value("ny", json()).is_number_integer()) {
      nx = g["nx"].get<int>();
      ny = g["ny"].get<int>();
    } else {
      v.add("grid", "expected an integer or {nx, ny}");
    }
    if (nx < 2 || ny < 2 || nx > kMaxGrid || ny > kMaxGrid)
      v.add("grid", "grid dimensions must lie in [2, " + std::to_string(kMaxGrid) + "]");
  }

  std::vector<AnchorSpec> anchors;
  if (!body.contains("anchors") || !body["anchors"].is_array()) {
    v.add("anchors", "expected an array of anchors");
  } else {
    const auto& arr = body["anchors"];
    if (arr.empty() || arr.size() > 4) v.add("anchors", "between 1 and 4 anchors are required");
    for (std::size_t k = 0; k < arr.size(); ++k) {
      const std::string f = "anchors[" + std::to_string(k) + "]";
      const auto& a = arr[k];
      auto site = [&](const char* key) -> std::optional<AnchorSite> {
        if (!a.is_object() || !a.contains(key) || !a[key].is_string()) {
          v.add(f + "." + key, "missing site name");
          return std::nullopt;
        }
        auto s = parse_anchor_site(a[key].get<std::string>());
        if (!s) v.add(f + "." + key, "unknown site '" + a[key].get<std::string>() + "'");
        return s;
      };
      const std::string kind = a.is_object() && a.contains("kind") && a["kind"].is_string()
                                   ? a["kind"].get<std::string>()
                                   : (a.is_object() && a.contains("from") ? "segment" : "point");
      try {
        if (kind == "point") {
          if (auto s = site("site")) anchors.push_back(AnchorSpec::point(*s));
        } else if (kind == "segment") {
          auto from = site("from");
          auto to = site("to");
          if (from && to) {
            auto spec = AnchorSpec::segment(*from, *to);
            spec.validate();
            anchors.push_back(spec);
          }
        } else {
          v.add(f + ".kind", "kind must be 'point' or 'segment'");
        }
      } catch (const std::invalid_argument& e) {
        v.add(f, e.what());
      }
    }
    for (std::size_t i = 0; i < anchors.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (anchors[i] == anchors[j]) v.add("anchors", "duplicate anchor");
  }

  double lx = 0, ly = 0, angle = 0;
  if (!body.contains("load") || !body["load"].is_object()) {
    v.add("load", "expected {x, y, angle}");
  } else {
    const auto& l = body["load"];
    for (const char* key : {"x", "y"}) {
      if (!l.contains(key) || !is_number(l[key]))
        v.add(std::string("load.") + key, "expected a number in [0, 1]");
      else if (l[key].get<double>() < 0.0 || l[key].get<double>() > 1.0)
        v.add(std::string("load.") + key, "must lie in [0, 1]");
    }
    if (!l.contains("angle") || !is_number(l["angle"])) v.add("load.angle", "expected an angle in degrees");
    if (v.ok()) {
      lx = l["x"].get<double>();
      ly = l["y"].get<double>();
      angle = l["angle"].get<double>();
    }
  }

  double f = 0.4;
  const bool allow_any_f = body.value("allow_any_f", false);
  const char* fkey = body.contains("f") ? "f" : "volume_fraction";
  if (!body.contains(fkey) || !is_number(body[fkey])) {
    v.add("f", "expected a volume fraction");
  } else {
    f = body[fkey].get<double>();
    if (!(f > 0.0 && f < 1.0))
      v.add("f", "volume fraction must lie in (0, 1)");
    else if (!allow_any_f && (f < 0.3 || f > 0.5))
      v.add("f", "volume fraction outside the sampled range [0.3, 0.5]; set allow_any_f to override");
  }
  if (!v.ok()) return std::nullopt;

  fem::DesignDomain d;
  d.nx = nx;
  d.ny = ny;
  const int node = nearest_boundary_node(d, lx, ly);
  Problem p = make_problem(d, anchors, node, 0.0, f);
  std::tie(p.load.fx, p.load.fy) = io::direction_from_degrees(angle);
  if (!fem::constrains_rigid_body_modes(d, p.supports)) {
    v.add("anchors", "anchors leave the structure free to move or rotate");
    return std::nullopt;
  }
  if (p.supports.is_fixed(2 * node) || p.supports.is_fixed(2 * node + 1)) {
    v.add("load", "load lies on an anchored node");
    return std::nullopt;
  }
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    v.add("problem", e.what());
    return std::nullopt;
  }
  return p;
}

enum class Status { Queued, Running, Done, Failed, Cancelled };

const char* to_string(Status s) {
  switch (s) {
    case Status::Queued: return "queued";
    case Status::Running: return "running";
    case Status::Done: return "done";
    case Status::Failed: return "failed";
    case Status::Cancelled: return "cancelled";
  }
  return "?";
}

bool terminal(Status s) { return s == Status::Done || s == Status::Failed || s == Status::Cancelled; }

struct Job {
  std::string id, kind;
  std::shared_ptr<const ProblemEntry> problem;
  json params;
  std::shared_ptr<const dit::DiT<float>> model;  // dit jobs only

  std::mutex m;
  std::condition_variable cv;
  Status status = Status::Queued;
  long progress = 0;
  std::vector<std::string> events;  // serialized SSE frames, replayed to every subscriber
  json result;
  std::string error;
  std::atomic<bool> cancel{false};

  void emit(const char* type, const json& data) {
    std::lock_guard lock(m);
    events.push_back(std::string("event: ") + type + "\ndata: " + data.dump() + "\n\n");
    cv.notify_all();
  }

  json status_json() {
    std::lock_guard lock(m);
    json j = {{"job_id", id}, {"kind", kind}, {"status", to_string(status)}, {"progress", progress}};
    if (status == Status::Done) j["result"] = result;
    if (status == Status::Failed) j["error"] = error;
    return j;
  }
};

json design_metrics(const fem::DensityField& design, const Problem& p) {
  const auto binary = simp::binarize(design);
  json m = {{"volume_fraction", binary.mean()},
            {"vf_error_pct", metrics::volume_fraction_error_pct(binary, p.volume_fraction)},
            {"vf_signed_pct", metrics::volume_fraction_signed_pct(binary, p.volume_fraction)},
            {"load_discrepancy", metrics::load_discrepancy(binary, p)},
            {"floating_material", metrics::floating_material(binary, p)},
            {"metrics_version", metrics::kMetricsVersion}};
  try {
    m["compliance"] = metrics::compliance(binary, p);
  } catch (const fem::FeaError& e) {
    m["compliance"] = nullptr;
    m["note"] = e.what();
  }
  return m;
}

json checkpoint_echo(const dit::Checkpoint& ck) {
  const auto& c = ck.config;
  return {{"name", c.name()},           {"size", dit::to_string(c.size)}, {"patch_size", c.patch_size},
          {"img_size", c.img_size},     {"in_channels", c.in_channels},   {"out_channels", c.out_channels},
          {"depth", c.depth},           {"token_dim", c.token_dim},       {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"cond_dim", c.cond_dim},         {"freq_dim", c.freq_dim},
          {"log1p_fields", c.log1p_fields}, {"tokens", c.tokens()},       {"step", ck.step},
          {"seed", ck.seed},            {"learning_rate", ck.learning_rate}, {"batch_size", ck.batch_size}};
}

bool origin_allowed(const std::string& origin, const std::vector<std::string>& extra) {
  for (const char* prefix : {"http://localhost", "http://127.0.0.1", "http://[::1]"}) {
    const std::string p(prefix);
    if (origin == p || origin.rfind(p + ":", 0) == 0) return true;
  }
  return std::find(extra.begin(), extra.end(), origin) != extra.end();
}

}  // namespace

struct DesignService::Impl {
  ServiceConfig cfg;
  httplib::Server server;
  std::thread listener;
  std::vector<std::thread> workers;
  std::atomic<bool> stopping{false};
  bool started = false;

  std::mutex m;
  std::condition_variable queue_cv;
  std::deque<std::shared_ptr<Job>> queue;
  std::map<std::string, std::shared_ptr<Job>> jobs;
  std::map<std::string, std::shared_ptr<const ProblemEntry>> problems;
  std::uint64_t job_counter = 0;
  std::shared_ptr<const dit::DiT<float>> model;
  json model_info;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)) { routes(); }

  void routes() {
    server.set_post_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      const auto origin = req.get_header_value("Origin");
      if (!origin.empty() && origin_allowed(origin, cfg.extra_origins)) {
        res.set_header("Access-Control-Allow-Origin", origin);
        res.set_header("Vary", "Origin");
      }
    });
    server.Options(".*", [](const httplib::Request&, httplib::Response& res) {
      res.status = 204;
      res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.set_header("Access-Control-Max-Age", "600");
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      } catch (...) {
        send_error(res, 500, "unknown error");
      }
    });

    server.Post("/api/problems", [this](const httplib::Request& req, httplib::Response& res) { post_problem(req, res); });
    server.Post("/api/jobs", [this](const httplib::Request& req, httplib::Response& res) { post_job(req, res); });
    server.Get(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto job = find_job(req.matches[1]);
      if (!job) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
      send_json(res, 200, job->status_json());
    });
    server.Get(R"(/api/jobs/([^/]+)/events)",
               [this](const httplib::Request& req, httplib::Response& res) { stream_events(req, res); });
    server.Delete(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) { cancel_job(req, res); });
    server.Get("/api/checkpoints", [this](const httplib::Request&, httplib::Response& res) { list_checkpoints(res); });
    server.Post("/api/checkpoints/load",
                [this](const httplib::Request& req, httplib::Response& res) { load_checkpoint(req, res); });
  }

  static std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
    try {
      return json::parse(req.body);
    } catch (const json::parse_error& e) {
      send_json(res, 422, {{"error", "malformed JSON"}, {"errors", json::array({{{"field", "body"}, {"message", e.what()}}})}});
      return std::nullopt;
    }
  }

  void post_problem(const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req, res);
    if (!body) return;
    Validation v;
    auto p = parse_problem_body(*body, v);
    if (!p) return send_json(res, 422, v.to_json());

    std::ostringstream canon;
    io::write_problem(canon, *p);
    const std::string id = "p" + hex16(fnv1a(canon.str()));
    std::shared_ptr<const ProblemEntry> entry;
    {
      std::lock_guard lock(m);
      if (auto it = problems.find(id); it != problems.end()) entry = it->second;
    }
    if (!entry) {
      auto e = std::make_shared<ProblemEntry>();
      e->id = id;
      e->problem = *p;
      std::tie(e->stress, e->strain) = sampler::conditioning_fields(*p);
      std::lock_guard lock(m);
      entry = problems.emplace(id, std::move(e)).first->second;
    }
    const auto& q = entry->problem;
    json anchors = json::array();
    for (const auto& a : q.anchors) anchors.push_back(anchor_json(a));
    send_json(res, 200,
              {{"problem_id", id},
               {"nx", q.domain.nx},
               {"ny", q.domain.ny},
               {"f", q.volume_fraction},
               {"anchors", anchors},
               {"load",
                {{"node", q.load.node},
                 {"i", q.domain.node_i(q.load.node)},
                 {"j", q.domain.node_j(q.load.node)},
                 {"x", q.load_x()},
                 {"y", q.load_y()},
                 {"fx", q.load.fx},
                 {"fy", q.load.fy}}},
               {"stress", entry->stress.values},
               {"strain_energy", entry->strain.values}});
  }

  void post_job(const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req, res);
    if (!body) return;
    Validation v;
    if (!body->is_object()) return send_json(res, 422, {{"error", "expected a JSON object"}});
    const std::string pid = body->value("problem_id", "");
    const std::string engine = body->value("engine", "");
    json params = body->value("params", json::object());
    if (pid.empty()) v.add("problem_id", "required");
    if (engine != "simp" && engine != "dit") v.add("engine", "must be 'simp' or 'dit'");
    if (!params.is_object()) v.add("params", "expected an object");
    if (!v.ok()) return send_json(res, 422, v.to_json());

    std::shared_ptr<const ProblemEntry> problem;
    std::shared_ptr<const dit::DiT<float>> mdl;
    {
      std::lock_guard lock(m);
      if (auto it = problems.find(pid); it != problems.end()) problem = it->second;
      mdl = model;
    }
    if (!problem) return send_error(res, 404, "unknown problem " + pid);

    auto int_param = [&](const char* key, int def, int lo, int hi) {
      if (!params.contains(key)) return def;
      if (!params[key].is_number_integer() || params[key].get<long long>() < lo || params[key].get<long long>() > hi) {
        v.add(std::string("params.") + key, "expected an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        return def;
      }
      return params[key].get<int>();
    };
    auto real_param = [&](const char* key, double def, double lo, double hi) {
      if (!params.contains(key)) return def;
      if (!is_number(params[key]) || params[key].get<double>() < lo || params[key].get<double>() > hi) {
        v.add(std::string("params.") + key, "expected a number in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        return def;
      }
      return params[key].get<double>();
    };

    json resolved;
    if (engine == "simp") {
      resolved = {{"max_iters", int_param("max_iters", 100, 0, 1000)},
                  {"penalization", real_param("penalization", 3.0, 1.0, 5.0)},
                  {"filter_radius", real_param("filter_radius", 1.5, 1.0, 10.0)},
                  {"progress_every", int_param("progress_every", 1, 1, 1000)}};
    } else {
      const int steps = int_param("steps", 250, 1, 1000);
      const bool any = params.value("allow_any_steps", false);
      if (!any && std::find(kTestedSteps.begin(), kTestedSteps.end(), steps) == kTestedSteps.end())
        v.add("params.steps", "steps must be one of 1000, 250, 100, 25, 10, 5 unless allow_any_steps is set");
      std::uint64_t seed = 0;
      if (params.contains("seed")) {
        if (params["seed"].is_number_unsigned())
          seed = params["seed"].get<std::uint64_t>();
        else
          v.add("params.seed", "expected a non-negative integer");
      }
      resolved = {{"steps", steps}, {"seed", seed}, {"progress_every", int_param("progress_every", 1, 1, 1000)}};
      if (v.ok()) {
        if (!mdl) return send_error(res, 409, "no checkpoint loaded; POST /api/checkpoints/load first");
        if (mdl->config().img_size != problem->problem.domain.nx || problem->problem.domain.nx != problem->problem.domain.ny)
          v.add("problem_id", "loaded model expects a " + std::to_string(mdl->config().img_size) + "x" +
                                  std::to_string(mdl->config().img_size) + " grid");
      }
    }
    if (!v.ok()) return send_json(res, 422, v.to_json());

    auto job = std::make_shared<Job>();
    job->kind = engine;
    job->problem = problem;
    job->params = resolved;
    job->model = engine == "dit" ? mdl : nullptr;
    {
      std::lock_guard lock(m);
      std::ostringstream id;
      id << "j" << std::setw(6) << std::setfill('0') << ++job_counter;
      job->id = id.str();
      jobs[job->id] = job;
      queue.push_back(job);
    }
    queue_cv.notify_one();
    send_json(res, 202, {{"job_id", job->id}, {"kind", engine}, {"status", "queued"}, {"params", resolved}});
  }

  std::shared_ptr<Job> find_job(const std::string& id) {
    std::lock_guard lock(m);
    auto it = jobs.find(id);
    return it == jobs.end() ? nullptr : it->second;
  }

  void stream_events(const httplib::Request& req, httplib::Response& res) {
    auto job = find_job(req.matches[1]);
    if (!job) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
    res.set_header("Cache-Control", "no-cache");
    auto next = std::make_shared<std::size_t>(0);
    res.set_chunked_content_provider("text/event-stream", [this, job, next](std::size_t, httplib::DataSink& sink) {
      std::vector<std::string> batch;
      bool finished = false;
      {
        std::unique_lock lock(job->m);
        job->cv.wait_for(lock, std::chrono::milliseconds(100),
                         [&] { return job->events.size() > *next || stopping.load(); });
        batch.assign(job->events.begin() + static_cast<std::ptrdiff_t>(*next), job->events.end());
        *next = job->events.size();
        finished = terminal(job->status) && *next == job->events.size();
      }
      for (const auto& frame : batch)
        if (!sink.write(frame.data(), frame.size())) return false;
      if (finished || stopping) {
        sink.done();
        return true;
      }
      return sink.is_writable();
    });
  }

  void cancel_job(const httplib::Request& req, httplib::Response& res) {
    auto job = find_job(req.matches[1]);
    if (!job) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
    bool was_queued = false;
    {
      std::lock_guard lock(job->m);
      if (terminal(job->status))
        return send_error(res, 409, std::string("job already ") + to_string(job->status));
      job->cancel = true;
      if (job->status == Status::Queued) {
        job->status = Status::Cancelled;
        was_queued = true;
      }
    }
    if (was_queued) job->emit("cancelled", {{"status", "cancelled"}, {"progress", 0}});
    send_json(res, 202, {{"job_id", job->id}, {"status", was_queued ? "cancelled" : "cancelling"}});
  }

  void list_checkpoints(httplib::Response& res) {
    json list = json::array();
    std::error_code ec;
    std::vector<fs::path> files;
    if (fs::is_directory(cfg.checkpoint_dir, ec))
      for (const auto& e : fs::directory_iterator(cfg.checkpoint_dir, ec))
        if (e.is_regular_file() && e.path().extension() == ".ckpt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      json item = {{"file", f.filename().string()}};
      try {
        item.update(checkpoint_echo(dit::read_checkpoint_header(f.string())));
      } catch (const std::exception& e) {
        item["error"] = e.what();
      }
      list.push_back(item);
    }
    send_json(res, 200, list);
  }

  void load_checkpoint(const httplib::Request& req, httplib::Response& res) {
    auto body = parse_body(req, res);
    if (!body) return;
    if (!body->is_object() || !body->contains("path") || !(*body)["path"].is_string()) {
      Validation v;
      v.add("path", "expected a checkpoint path");
      return send_json(res, 422, v.to_json());
    }
    fs::path path = (*body)["path"].get<std::string>();
    if (path.is_relative()) path = fs::path(cfg.checkpoint_dir) / path;
    if (!fs::is_regular_file(path)) return send_error(res, 404, "no checkpoint at " + path.string());
    dit::Checkpoint ck;
    try {
      ck = dit::load_checkpoint(path.string());
    } catch (const dit::CheckpointError& e) {
      return send_json(res, 422, {{"error", "invalid checkpoint"}, {"detail", e.what()}});
    }
    auto mdl = std::make_shared<dit::DiT<float>>(ck.config);
    mdl->params() = ck.params;
    json echo = checkpoint_echo(ck);
    echo["file"] = path.filename().string();
    {
      std::lock_guard lock(m);
      model = std::move(mdl);
      model_info = echo;
    }
    send_json(res, 200, echo);
  }

  // ---------------------------------------------------------------- workers

  void worker_loop() {
    while (true) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock lock(m);
        queue_cv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (stopping) return;
        job = queue.front();
        queue.pop_front();
      }
      {
        std::lock_guard lock(job->m);
        if (job->status != Status::Queued) continue;  // cancelled while waiting
        job->status = Status::Running;
      }
      execute(*job);
    }
  }

  void finish(Job& job, Status status, json result, const std::string& error) {
    json event = {{"status", to_string(status)}};
    {
      std::lock_guard lock(job.m);
      job.status = status;
      event["progress"] = job.progress;
      if (status == Status::Done) job.result = result;
      if (status == Status::Failed) job.error = error;
    }
    if (status == Status::Done) event["result"] = std::move(result);
    if (status == Status::Failed) event["error"] = error;
    job.emit(to_string(status), event);
  }

  void execute(Job& job) {
    try {
      if (job.kind == "simp")
        run_simp(job);
      else
        run_dit(job);
    } catch (const std::exception& e) {
      finish(job, Status::Failed, {}, e.what());
    }
  }

  void run_simp(Job& job) {
    const auto& p = job.problem->problem;
    simp::SimpConfig cfg;
    cfg.max_iters = job.params["max_iters"].get<int>();
    cfg.penalization = job.params["penalization"].get<double>();
    cfg.filter_radius = job.params["filter_radius"].get<double>();
    const int every = job.params["progress_every"].get<int>();
    const auto trace = simp::optimize(p, cfg, [&](const simp::IterationInfo& info) {
      json ev = {{"iteration", info.iteration}, {"compliance", info.compliance}, {"volume", info.volume}};
      if (info.iteration % every == 0 || info.iteration == cfg.max_iters)
        ev["grid"] = progress_grid(info.density->values, p.domain.nx, p.domain.ny);
      {
        std::lock_guard lock(job.m);
        job.progress = info.iteration;
      }
      job.emit("progress", ev);
      return !job.cancel.load();
    });
    if (trace.cancelled || job.cancel) return finish(job, Status::Cancelled, {}, "");
    json result = {{"nx", p.domain.nx},
                   {"ny", p.domain.ny},
                   {"encoding", "f64"},
                   {"density", trace.final_density.values},
                   {"compliance_history", trace.compliance_history},
                   {"volume_history", trace.volume_history},
                   {"initial_compliance", trace.initial_compliance},
                   {"final_compliance", trace.final_compliance},
                   {"iterations", trace.iterations_run},
                   {"metrics", design_metrics(trace.final_density, p)}};
    finish(job, Status::Done, std::move(result), "");
  }

  void run_dit(Job& job) {
    const auto& entry = *job.problem;
    const auto& p = entry.problem;
    const int img = p.domain.nx, steps = job.params["steps"].get<int>(), every = job.params["progress_every"].get<int>();
    dit::SampleCondition cond;
    cond.stress.assign(entry.stress.values.begin(), entry.stress.values.end());
    cond.strain.assign(entry.strain.values.begin(), entry.strain.values.end());
    cond.cond = {static_cast<float>(p.load_x()), static_cast<float>(p.load_y()), static_cast<float>(p.load.fx),
                 static_cast<float>(p.load.fy), static_cast<float>(p.volume_fraction)};
    cond.noise_seed = mix_seed(job.params["seed"].get<std::uint64_t>(), 0);

    const auto schedule = diffusion::linear_schedule(1000);
    const auto plan = diffusion::make_plan(1000, steps);
    dit::ModelDenoiser denoiser(job.model);
    std::vector<std::vector<float>> out;
    try {
      out = dit::sample_topologies(denoiser, schedule, plan, {cond},
                                   [&](std::size_t k, int t, const std::vector<float>& x0) {
                                     json ev = {{"step", k + 1}, {"t", t}, {"of", plan.steps.size()}};
                                     if ((k + 1) % every == 0 || k + 1 == plan.steps.size())
                                       ev["grid"] = progress_grid(std::vector<double>(x0.begin(), x0.end()), img, img);
                                     {
                                       std::lock_guard lock(job.m);
                                       job.progress = static_cast<long>(k + 1);
                                     }
                                     job.emit("progress", ev);
                                     return !job.cancel.load();
                                   });
    } catch (const dit::SamplingCancelled&) {
      return finish(job, Status::Cancelled, {}, "");
    }
    if (job.cancel) return finish(job, Status::Cancelled, {}, "");
    const auto field = io::field_from(out[0], img, img);
    json result = {{"nx", img},
                   {"ny", img},
                   {"encoding", "f32"},
                   {"density", out[0]},
                   {"steps", plan.steps.size()},
                   {"model", job.model->config().name()},
                   {"metrics", design_metrics(field, p)}};
    finish(job, Status::Done, std::move(result), "");
  }

  void start_workers() {
    for (int k = 0; k < std::max(1, cfg.queue_width); ++k) workers.emplace_back([this] { worker_loop(); });
  }

  int bind() {
    const int port = cfg.port == 0 ? server.bind_to_any_port(cfg.host)
                                   : (server.bind_to_port(cfg.host, cfg.port) ? cfg.port : -1);
    if (port < 0) throw std::runtime_error("cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
    started = true;
    start_workers();
    return port;
  }

  void stop() {
    if (stopping.exchange(true)) return;
    {
      std::lock_guard lock(m);
      for (auto& [id, job] : jobs) job->cancel = true;
    }
    queue_cv.notify_all();
    server.stop();
    if (listener.joinable()) listener.join();
    for (auto& w : workers)
      if (w.joinable()) w.join();
  }
};

DesignService::DesignService(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

DesignService::~DesignService() { stop(); }

int DesignService::start() {
  const int port = impl_->bind();
  impl_->listener = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void DesignService::run() {
  impl_->bind();
  impl_->server.listen_after_bind();
}

void DesignService::stop() {
  if (impl_) impl_->stop();
}

}  // namespace topoforge::service
