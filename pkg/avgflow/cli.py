"""cli: declarative argparse commandline interface

Provides a declarative argparse-based class to be inherited by the
application. Each `do_<name>` method becomes the subcommand `<name>` with
underscores shown as hyphens; options are attached with the `option` and
`arg` decorators.

Library errors (AvgFlowError) are reported as one JSON line on stderr:

    {"command": "train", "error": "PipelineError", "message": "..."}
"""
import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .config import setup_logging
from .errors import AvgFlowError

EXIT_OK = 0
EXIT_ERROR = 1

# ------------------------------------------------------------------------------
# decorators


# option decorator
def option(*args, **kwds):
    """decorator to provide an argparse option to a method."""

    def _decorator(func):
        _option = (args, kwds)
        if hasattr(func, "options"):
            func.options.append(_option)
        else:
            func.options = [_option]
        return func

    return _decorator


# arg decorator
arg = option


# combines option decorators
def option_group(*options):
    """Collection of options to simplify common options reuse."""

    def _decorator(func):
        for opt in options:
            func = opt(func)
        return func

    return _decorator


class MetaCommander(type):
    """Metaclass to collect `do_*` methods as subcommands"""

    def __new__(cls, classname, bases, classdict):
        subcmds = {}
        for name, func in list(classdict.items()):
            if name.startswith("do_"):
                name = name[3:].replace("_", "-")
                subcmds[name] = {
                    "name": name,
                    "func": func,
                    "options": getattr(func, "options", []),
                }
        classdict["_argparse_subcmds"] = subcmds
        return type.__new__(cls, classname, bases, classdict)


class Commander(metaclass=MetaCommander):
    """app: description here"""

    name = "app name"
    epilog = ""
    version = "0.1"
    default_args = ["--help"]
    _argparse_subcmds: dict  # just to silence static checkers

    def _add_parser(self, subparsers, subcmd):
        subparser = subparsers.add_parser(
            subcmd["name"],
            help=subcmd["func"].__doc__,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        # decorators apply bottom-up; reverse to keep declaration order
        for args, kwds in reversed(subcmd["options"]):
            subparser.add_argument(*args, **kwds)
        subparser.set_defaults(func=subcmd["func"], command=subcmd["name"])
        return subparser

    def parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog=self.name,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
            description=self.__doc__,
            epilog=self.epilog,
        )
        parser.add_argument(
            "-v", "--version", action="version", version="%(prog)s " + self.version
        )
        parser.add_argument("--debug", action="store_true", help="debug logging")
        subparsers = parser.add_subparsers(
            title="subcommands",
            description="valid subcommands",
            help="additional help",
            metavar="",
        )
        for name in sorted(self._argparse_subcmds):
            self._add_parser(subparsers, self._argparse_subcmds[name])
        return parser

    def report_error(self, command: str, err: AvgFlowError):
        payload = {"command": command, **err.to_dict()}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)

    def cmdline(self, argv: Optional[Sequence[str]] = None) -> int:
        """process commandline arguments and options; returns the exit code"""
        argv = list(sys.argv[1:] if argv is None else argv)
        options = self.parser().parse_args(argv or self.default_args)
        setup_logging(options.debug)
        try:
            res = options.func(self, options)
        except AvgFlowError as err:
            logging.getLogger(self.__class__.__name__).debug("command failed", exc_info=True)
            self.report_error(options.command, err)
            return EXIT_ERROR
        return EXIT_OK if res is None else int(res)
