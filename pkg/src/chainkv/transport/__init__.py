"""Network transports: deterministic simulator and asyncio TCP."""
