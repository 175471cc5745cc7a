/** Minimal server-sent-events reader over fetch.
 *
 * EventSource is absent in node and cannot send query strings per
 * request cleanly, so both the browser app and the tests share this:
 * read the response body as a stream, split on blank lines, parse
 * `data:` payloads as JSON, skip `:` keepalive comments.
 */

export async function* sseStream<T = unknown>(
  url: string,
  signal?: AbortSignal,
): AsyncGenerator<T> {
  const res = await fetch(url, {
    headers: { accept: "text/event-stream" },
    signal,
  });
  if (!res.ok || !res.body) {
    throw new Error(`event stream failed: HTTP ${res.status}`);
  }
  const reader = res.body.getReader();
  const decoder = new TextDecoder();
  let buf = "";
  try {
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      buf += decoder.decode(value, { stream: true });
      let sep;
      while ((sep = buf.indexOf("\n\n")) >= 0) {
        const frame = buf.slice(0, sep);
        buf = buf.slice(sep + 2);
        const data = parseFrame(frame);
        if (data !== null) yield JSON.parse(data) as T;
      }
    }
    // Trailing frame without the final blank line (server closed early).
    const data = parseFrame(buf);
    if (data !== null) yield JSON.parse(data) as T;
  } finally {
    reader.cancel().catch(() => {});
  }
}

function parseFrame(frame: string): string | null {
  const parts: string[] = [];
  for (const rawLine of frame.split("\n")) {
    const line = rawLine.endsWith("\r") ? rawLine.slice(0, -1) : rawLine;
    if (line.startsWith(":") || line === "") continue;
    if (line.startsWith("data:")) {
      parts.push(line.slice(5).replace(/^ /, ""));
    }
    // Other SSE fields (event:, id:, retry:) are not used by the service.
  }
  return parts.length ? parts.join("\n") : null;
}
