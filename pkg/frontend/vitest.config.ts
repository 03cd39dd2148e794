import { defineConfig } from "vitest/config";

export default defineConfig({
    test: {
        testTimeout: 20000, // integration tests render real frames
        hookTimeout: 60000,
    },
});
