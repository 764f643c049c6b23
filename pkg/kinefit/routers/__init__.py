import argparse
from dataclasses import dataclass, field
from typing import Callable, List

Handler = Callable[[argparse.Namespace], int]
Arguments = Callable[[argparse.ArgumentParser], None]


@dataclass
class Command:
    name: str
    help: str
    arguments: Arguments
    handler: Handler


@dataclass
class CommandRouter:
    """Collects subcommands of one module; `main` includes every router into the CLI."""
    commands: List[Command] = field(default_factory=list)

    def command(self, name: str, help: str, arguments: Arguments):
        def decorator(handler: Handler) -> Handler:
            self.commands.append(Command(name, help, arguments, handler))
            return handler
        return decorator

    def register(self, subparsers) -> None:
        for command in self.commands:
            parser = subparsers.add_parser(command.name, help=command.help, description=command.help)
            command.arguments(parser)
            parser.set_defaults(handler=command.handler)


def add_config_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="RunConfig JSON (default: $KINEFIT_CONFIG, else built-in defaults)")
