#pragma once

#include <string>

namespace conretrieve {

struct RetryPolicy {
    int attempts = 3;
    int initial_delay_ms = 1000;
    double multiplier = 2.0;
};

// A text-in, text-out chat completion service. Implementations must be safe
// to call from multiple threads at once.
class ChatBackend {
   public:
    virtual ~ChatBackend() = default;
    virtual std::string complete(const std::string& prompt) = 0;
    virtual std::string describe() const = 0;
};

struct RemoteEndpoint {
    std::string url;  // scheme://host[:port][/path]
    std::string model;
    std::string token_env = "CONRETRIEVE_API_TOKEN";
};

// OpenAI-style chat completion client. Sends
// {model, messages: [{role: "user", content: <prompt>}], temperature: 0,
// max_tokens: 80} and reads choices[0].message.content. The auth token, if
// the configured environment variable is set, travels as a bearer header.
class RemoteChatBackend : public ChatBackend {
   public:
    explicit RemoteChatBackend(RemoteEndpoint endpoint);

    std::string complete(const std::string& prompt) override;
    std::string describe() const override;

   private:
    RemoteEndpoint endpoint_;
    std::string base_;  // scheme://host:port
    std::string path_;  // request path, default /v1/chat/completions
};

// Runs backend.complete, retrying transport failures with exponential
// backoff. Blank completions are a model problem, not a transport problem,
// and are not retried.
std::string complete_with_retry(ChatBackend& backend, const std::string& prompt,
                                const RetryPolicy& retry);

}  // namespace conretrieve
