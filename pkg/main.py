from avseg.route import create_app

app = create_app()
