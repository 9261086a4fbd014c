"""Serve the adapter: python -m wire_adapter [--host H] [--port P] [--assets-dir D]."""

import argparse


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument(
        "--assets-dir", default=None, help="directory holding the wire schema files"
    )
    args = parser.parse_args()

    try:
        import uvicorn
    except ImportError:
        parser.error("serving needs uvicorn: pip install 'wire-adapter[serve]'")

    from .service import create_app

    uvicorn.run(create_app(assets_dir=args.assets_dir), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
