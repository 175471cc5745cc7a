import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    environment: "node",
    // The session test spins up the Python backend and drives a full
    // three-instruction generation pass; give it room on one core.
    testTimeout: 240_000,
    hookTimeout: 240_000,
    // Serialize files: the server fixture binds a port and the numerical
    // backend is single-core anyway.
    fileParallelism: false,
  },
});
