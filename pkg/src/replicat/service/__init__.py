from .app import AUTH_HEADER, create_app  # noqa: F401
